use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{axis_split, inverse_perm, permute_into, Tensor};
use crate::error::{Error, Result};

/// Records differentiable operations for a single forward/backward pass.
///
/// A tape is confined to one thread; run independent passes on separate tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy)]
enum MatMulKind {
    /// `[.., m, k] x [k, n]`, leading axes folded into rows.
    Flat { rows: usize, k: usize, n: usize },
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Silu(usize),
    Gelu(usize),
    Abs(usize),
    Sum(usize),
    MeanAxis { x: usize, axis: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Slice { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    GatherFrames { x: usize, perms: Rc<Vec<Vec<usize>>> },
    MatMul { a: usize, b: usize, kind: MatMulKind },
    Conv2d { x: usize, w: usize, geom: ConvGeom, batch: usize, cols: Vec<f64> },
    Softmax { x: usize, axis: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    NormLast(usize),
}

pub const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, &[], true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, &[], false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize], leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = if inputs.is_empty() {
            leaf_grad
        } else {
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        if cfg!(debug_assertions) && !inputs.is_empty() && !value.is_finite() {
            let finite_inputs = inputs.iter().all(|&i| nodes[i].value.is_finite());
            debug_assert!(!finite_inputs, "non-finite output from finite inputs");
        }
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a single-element `loss`. Leaves that the loss does
    /// not depend on report zero gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf handle.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match self.grads[var.id].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(shape),
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: &[f64]) {
    if let Some(slot) = grad_slot(grads, nodes, id) {
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let sa = kernels::broadcast_strides(va.shape(), out.shape());
            let sb = kernels::broadcast_strides(vb.shape(), out.shape());
            let mut ga = vec![0.0; va.numel()];
            let mut gb = vec![0.0; vb.numel()];
            match &nodes[id].op {
                Op::Add(..) => kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] += g[o];
                }),
                Op::Sub(..) => kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] -= g[o];
                }),
                _ => {
                    let (da, db) = (va.data(), vb.data());
                    kernels::for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                        ga[ia] += g[o] * db[ib];
                        gb[ib] += g[o] * da[ia];
                    })
                }
            }
            accumulate(grads, nodes, a, &ga);
            accumulate(grads, nodes, b, &gb);
        }
        Op::Scale(x, k) => {
            let gx: Vec<f64> = g.iter().map(|v| v * k).collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, nodes, *x, g),
        Op::Sigmoid(x) => {
            let gx: Vec<f64> = g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Silu(x) => {
            let xs = nodes[*x].value.data();
            let gx: Vec<f64> = g
                .iter()
                .zip(xs)
                .map(|(g, &x)| {
                    let s = kernels::sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Gelu(x) => {
            let xs = nodes[*x].value.data();
            let gx: Vec<f64> = g
                .iter()
                .zip(xs)
                .map(|(g, &x)| {
                    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })
                .collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Abs(x) => {
            let xs = nodes[*x].value.data();
            let gx: Vec<f64> = g
                .iter()
                .zip(xs)
                .map(|(g, &x)| {
                    if x > 0.0 {
                        *g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Sum(x) => {
            let gx = vec![g[0]; nodes[*x].value.numel()];
            accumulate(grads, nodes, *x, &gx);
        }
        Op::MeanAxis { x, axis } => {
            let (outer, n, inner) = axis_split(nodes[*x].value.shape(), *axis);
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                let inv = 1.0 / n as f64;
                for o in 0..outer {
                    for i in 0..n {
                        let dst = &mut gx[(o * n + i) * inner..][..inner];
                        for (d, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += v * inv;
                        }
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            let mut gx = vec![0.0; g.len()];
            permute_into(out.shape(), &inverse_perm(perm), g, &mut gx);
            accumulate(grads, nodes, *x, &gx);
        }
        Op::Slice { x, axis, start } => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let full = nodes[*x].value.shape()[*axis];
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..][..len * inner];
                    for (d, v) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += v;
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let len = nodes[x].value.shape()[*axis];
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..len * inner];
                        for (d, v) in gx[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::GatherFrames { x, perms } => {
            let (rows, s, inner) = axis_split(out.shape(), 1);
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for r in 0..rows {
                    for (j, &src) in perms[r].iter().enumerate() {
                        let dst = &mut gx[(r * s + src) * inner..][..inner];
                        for (d, v) in dst.iter_mut().zip(&g[(r * s + j) * inner..][..inner]) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::MatMul { a, b, kind } => {
            let (a, b) = (*a, *b);
            let (da, db) = (nodes[a].value.data(), nodes[b].value.data());
            match *kind {
                MatMulKind::Flat { rows, k, n } => {
                    if nodes[a].requires_grad {
                        let mut ga = vec![0.0; rows * k];
                        kernels::gemm(rows, n, k, g, false, db, true, &mut ga, false);
                        accumulate(grads, nodes, a, &ga);
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, rows, n, da, true, g, false, &mut gb, false);
                        accumulate(grads, nodes, b, &gb);
                    }
                }
                MatMulKind::Batched { batch, m, k, n } => {
                    if nodes[a].requires_grad {
                        let mut ga = vec![0.0; batch * m * k];
                        for i in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..][..m * n],
                                false,
                                &db[i * k * n..][..k * n],
                                true,
                                &mut ga[i * m * k..][..m * k],
                                false,
                            );
                        }
                        accumulate(grads, nodes, a, &ga);
                    }
                    if nodes[b].requires_grad {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &da[i * m * k..][..m * k],
                                true,
                                &g[i * m * n..][..m * n],
                                false,
                                &mut gb[i * k * n..][..k * n],
                                false,
                            );
                        }
                        accumulate(grads, nodes, b, &gb);
                    }
                }
            }
        }
        Op::Conv2d { x, w, geom, batch, cols } => {
            let (x, w) = (*x, *w);
            let c_out = nodes[w].value.shape()[0];
            let (rows, ncol) = (geom.col_rows(), geom.col_cols());
            let wd = nodes[w].value.data();
            if nodes[w].requires_grad {
                let mut gw = vec![0.0; c_out * rows];
                for i in 0..*batch {
                    kernels::gemm(
                        c_out,
                        ncol,
                        rows,
                        &g[i * c_out * ncol..][..c_out * ncol],
                        false,
                        &cols[i * rows * ncol..][..rows * ncol],
                        true,
                        &mut gw,
                        true,
                    );
                }
                accumulate(grads, nodes, w, &gw);
            }
            if nodes[x].requires_grad {
                let img = geom.c_in * geom.h * geom.w;
                let mut gx = vec![0.0; batch * img];
                let mut dcols = vec![0.0; rows * ncol];
                for i in 0..*batch {
                    kernels::gemm(
                        rows,
                        c_out,
                        ncol,
                        wd,
                        true,
                        &g[i * c_out * ncol..][..c_out * ncol],
                        false,
                        &mut dcols,
                        false,
                    );
                    kernels::col2im_add(geom, &dcols, &mut gx[i * img..][..img]);
                }
                accumulate(grads, nodes, x, &gx);
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        gx[p] = y[p] * (g[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *x, &gx);
        }
        Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
            let shape = out.shape();
            let (n, c) = (shape[0], shape[1]);
            let l: usize = shape[2..].iter().product();
            let cg = c / groups;
            let gam = nodes[*gamma].value.data();
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut gx = vec![0.0; g.len()];
            for s in 0..n {
                for grp in 0..*groups {
                    let base = (s * c + grp * cg) * l;
                    let m = (cg * l) as f64;
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        for p in 0..l {
                            let o = base + ci * l + p;
                            gg[ch] += g[o] * xhat[o];
                            gbeta[ch] += g[o];
                            let d = g[o] * gam[ch];
                            sum_d += d;
                            sum_dx += d * xhat[o];
                        }
                    }
                    let r = rstd[s * groups + grp];
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        for p in 0..l {
                            let o = base + ci * l + p;
                            let d = g[o] * gam[ch];
                            gx[o] = r / m * (m * d - sum_d - xhat[o] * sum_dx);
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, &gx);
            accumulate(grads, nodes, *gamma, &gg);
            accumulate(grads, nodes, *beta, &gbeta);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *out.shape().last().unwrap();
            let rows = out.numel() / d;
            let gam = nodes[*gamma].value.data();
            let mut gg = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let mut gx = vec![0.0; g.len()];
            let m = d as f64;
            for r in 0..rows {
                let (gr, xr) = (&g[r * d..][..d], &xhat[r * d..][..d]);
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for j in 0..d {
                    gg[j] += gr[j] * xr[j];
                    gbeta[j] += gr[j];
                    let dj = gr[j] * gam[j];
                    sum_d += dj;
                    sum_dx += dj * xr[j];
                }
                for j in 0..d {
                    let dj = gr[j] * gam[j];
                    gx[r * d + j] = rstd[r] / m * (m * dj - sum_d - xr[j] * sum_dx);
                }
            }
            accumulate(grads, nodes, *x, &gx);
            accumulate(grads, nodes, *gamma, &gg);
            accumulate(grads, nodes, *beta, &gbeta);
        }
        Op::NormLast(x) => {
            let xv = &nodes[*x].value;
            let d = *xv.shape().last().unwrap();
            let xs = xv.data();
            let mut gx = vec![0.0; xs.len()];
            for (r, (&gr, &nr)) in g.iter().zip(out.data()).enumerate() {
                if nr > 0.0 {
                    for j in 0..d {
                        gx[r * d + j] = gr * xs[r * d + j] / nr;
                    }
                }
            }
            accumulate(grads, nodes, *x, &gx);
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank differs: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(ax, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(
                op,
                format!("axis {ax}: {x} vs {y} (shapes {a:?} and {b:?})"),
            )),
        })
        .collect()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
        };
        self.tape.push(value, op, &[self.id], false)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(shape, data)
            } else {
                let sa = kernels::broadcast_strides(a.shape(), &shape);
                let sb = kernels::broadcast_strides(b.shape(), &shape);
                let mut data = vec![0.0; shape.iter().product()];
                let (da, db) = (a.data(), b.data());
                kernels::for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
                Tensor::from_parts(shape, data)
            }
        };
        Ok(self.tape.push(value, op, &[self.id, other.id], false))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |x| x * k)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Op::Silu(self.id), |x| x * kernels::sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id], false)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Arithmetic mean over `axis`; the axis is removed.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if axis >= v.ndim() {
                return Err(Error::shape("mean_axis", format!("axis {axis} out of range for {:?}", v.shape())));
            }
            let (outer, n, inner) = axis_split(v.shape(), axis);
            if n == 0 {
                return Err(Error::shape("mean_axis", format!("axis {axis} is empty in {:?}", v.shape())));
            }
            let mut data = vec![0.0; outer * inner];
            let d = v.data();
            for o in 0..outer {
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..n {
                    for (acc, x) in dst.iter_mut().zip(&d[(o * n + i) * inner..][..inner]) {
                        *acc += x;
                    }
                }
                for acc in dst.iter_mut() {
                    *acc /= n as f64;
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(value, Op::MeanAxis { x: self.id, axis }, &[self.id], false))
    }

    /// Average pooling that collapses `axis` (same as [`Var::mean_axis`]).
    pub fn avg_pool_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.mean_axis(axis)
    }

    /// Mean over the last two (spatial) axes: `[.., C, H, W] -> [.., C]`.
    pub fn global_avg_pool_2d(&self) -> Result<Var<'t>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(Error::shape("global_avg_pool_2d", "need at least [H, W]"));
        }
        self.mean_axis(nd - 1)?.mean_axis(nd - 2)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id), &[self.id], false))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.value().permute(perm)?;
        Ok(self.tape.push(
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
            false,
        ))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if axis >= v.ndim() || start + len > v.shape()[axis] {
                return Err(Error::shape(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, v.shape()),
                ));
            }
            let (outer, full, inner) = axis_split(v.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&v.data()[(o * full + start) * inner..][..len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
            false,
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
                }
                total += s[axis];
            }
            let (outer, _, inner) = axis_split(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(value, Op::Concat { xs: ids.clone(), axis }, &ids, false))
    }

    /// For `x: [R, S, ...]`, output row `r` frame `j` is input frame `perms[r][j]`.
    pub fn gather_frames(&self, perms: Rc<Vec<Vec<usize>>>) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if v.ndim() < 2 || perms.len() != v.shape()[0] {
                return Err(Error::shape(
                    "gather_frames",
                    format!("{} permutations for tensor {:?}", perms.len(), v.shape()),
                ));
            }
            let (rows, s, inner) = axis_split(v.shape(), 1);
            let mut data = vec![0.0; v.numel()];
            for r in 0..rows {
                let p = &perms[r];
                if p.len() != s || p.iter().any(|&i| i >= s) {
                    return Err(Error::shape("gather_frames", format!("row {r}: {p:?} is not a frame index list for S={s}")));
                }
                for (j, &src) in p.iter().enumerate() {
                    data[(r * s + j) * inner..][..inner]
                        .copy_from_slice(&v.data()[(r * s + src) * inner..][..inner]);
                }
            }
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::GatherFrames { x: self.id, perms }, &[self.id], false))
    }

    /// `[.., m, k] x [k, n]` or batched `[B.., m, k] x [B.., k, n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (value, kind) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::shape("matmul", format!("operands must be at least 2-D: {sa:?} x {sb:?}")));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            if k != kb {
                return Err(Error::shape("matmul", format!("inner extent k: {k} vs {kb} ({sa:?} x {sb:?})")));
            }
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            if sb.len() == 2 {
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let mut data = vec![0.0; rows * n];
                kernels::gemm(rows, k, n, a.data(), false, b.data(), false, &mut data, false);
                (Tensor::from_parts(shape, data), MatMulKind::Flat { rows, k, n })
            } else if sa.len() == sb.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let mut data = vec![0.0; batch * m * n];
                for i in 0..batch {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &a.data()[i * m * k..][..m * k],
                        false,
                        &b.data()[i * k * n..][..k * n],
                        false,
                        &mut data[i * m * n..][..m * n],
                        false,
                    );
                }
                (Tensor::from_parts(shape, data), MatMulKind::Batched { batch, m, k, n })
            } else {
                return Err(Error::shape("matmul", format!("batch axes differ: {sa:?} x {sb:?}")));
            }
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                kind,
            },
            &[self.id, other.id],
            false,
        ))
    }

    /// Zero-padded "same" cross-correlation. `self` is `[C_in, H, W]` or
    /// `[N, C_in, H, W]`, `weight` is `[C_out, C_in, k, k]` with k in {1, 3}.
    pub fn conv2d(&self, weight: Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (value, geom, batch, cols) = {
            let (x, w) = (self.value(), weight.value());
            let (xs, ws) = (x.shape(), w.shape());
            let (batch, c_in, h, wd) = match xs.len() {
                3 => (1, xs[0], xs[1], xs[2]),
                4 => (xs[0], xs[1], xs[2], xs[3]),
                _ => return Err(Error::shape("conv2d", format!("input must be [C_in,H,W] or [N,C_in,H,W], got {xs:?}"))),
            };
            if ws.len() != 4 {
                return Err(Error::shape("conv2d", format!("weight must be [C_out,C_in,k,k], got {ws:?}")));
            }
            if ws[1] != c_in {
                return Err(Error::shape("conv2d", format!("C_in: input has {c_in}, weight expects {}", ws[1])));
            }
            let k = ws[2];
            if ws[3] != k || !(k == 1 || k == 3) {
                return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {}x{}", ws[2], ws[3])));
            }
            let geom = ConvGeom::new(c_in, h, wd, k, stride, k / 2)
                .ok_or_else(|| Error::shape("conv2d", format!("H, W = {h}, {wd} too small or stride {stride} invalid")))?;
            let c_out = ws[0];
            let (rows, ncol) = (geom.col_rows(), geom.col_cols());
            let img = c_in * h * wd;
            let mut cols = vec![0.0; batch * rows * ncol];
            let mut out = vec![0.0; batch * c_out * ncol];
            for i in 0..batch {
                let c = &mut cols[i * rows * ncol..][..rows * ncol];
                kernels::im2col(&geom, &x.data()[i * img..][..img], c);
                kernels::gemm(c_out, rows, ncol, w.data(), false, c, false, &mut out[i * c_out * ncol..][..c_out * ncol], false);
            }
            let shape = if xs.len() == 3 {
                vec![c_out, geom.h_out, geom.w_out]
            } else {
                vec![batch, c_out, geom.h_out, geom.w_out]
            };
            (Tensor::from_parts(shape, out), geom, batch, cols)
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                batch,
                cols,
            },
            &[self.id, weight.id],
            false,
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            if axis >= v.ndim() {
                return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", v.shape())));
            }
            let (outer, n, inner) = axis_split(v.shape(), axis);
            let d = v.data();
            let mut data = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let max = (0..n).map(|j| d[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..n {
                        let e = (d[base + j * inner] - max).exp();
                        data[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..n {
                        data[base + j * inner] /= z;
                    }
                }
            }
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        Ok(self.tape.push(value, Op::Softmax { x: self.id, axis }, &[self.id], false))
    }

    /// Group normalization of `[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&self, groups: usize, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, xhat, rstd) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let shape = x.shape().to_vec();
            if shape.len() < 2 {
                return Err(Error::shape("group_norm", format!("input must be [N, C, ...], got {shape:?}")));
            }
            let (n, c) = (shape[0], shape[1]);
            if groups == 0 || c % groups != 0 {
                return Err(Error::shape("group_norm", format!("groups {groups} must divide C = {c}")));
            }
            if gm.shape() != [c] || bt.shape() != [c] {
                return Err(Error::shape(
                    "group_norm",
                    format!("affine params must be [{c}], got {:?} and {:?}", gm.shape(), bt.shape()),
                ));
            }
            let l: usize = shape[2..].iter().product();
            let cg = c / groups;
            let d = x.data();
            let mut xhat = vec![0.0; d.len()];
            let mut out = vec![0.0; d.len()];
            let mut rstd = vec![0.0; n * groups];
            for s in 0..n {
                for grp in 0..groups {
                    let base = (s * c + grp * cg) * l;
                    let chunk = &d[base..base + cg * l];
                    let m = chunk.len() as f64;
                    let mean = chunk.iter().sum::<f64>() / m;
                    let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let r = 1.0 / (var + NORM_EPS).sqrt();
                    rstd[s * groups + grp] = r;
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        for p in 0..l {
                            let o = base + ci * l + p;
                            xhat[o] = (d[o] - mean) * r;
                            out[o] = xhat[o] * gm.data()[ch] + bt.data()[ch];
                        }
                    }
                }
            }
            (Tensor::from_parts(shape, out), xhat, rstd)
        };
        Ok(self.tape.push(
            value,
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
            false,
        ))
    }

    /// Normalizes over the last axis with affine `gamma`, `beta` of that extent.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, xhat, rstd) = {
            let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
            let shape = x.shape().to_vec();
            let d = *shape
                .last()
                .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            if gm.shape() != [d] || bt.shape() != [d] {
                return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
            }
            let rows = x.numel() / d.max(1);
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data()[r * d..][..d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + NORM_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * gm.data()[j] + bt.data()[j];
                }
            }
            (Tensor::from_parts(shape, out), xhat, rstd)
        };
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
            false,
        ))
    }

    /// Euclidean norm over the last axis; the gradient at a zero vector is 0.
    pub fn norm_last(&self) -> Result<Var<'t>> {
        let value = {
            let v = self.value();
            let mut shape = v.shape().to_vec();
            let d = shape
                .pop()
                .ok_or_else(|| Error::shape("norm_last", "scalar input"))?;
            let data = v
                .data()
                .chunks(d.max(1))
                .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape.push(value, Op::NormLast(self.id), &[self.id], false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = w.mul(w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).item(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::full([3], 2.0));
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = c.scale(2.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[0.0; 3]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let used = tape.leaf(Tensor::full([2], 1.0));
        let unused = tape.leaf(Tensor::full([2], 1.0));
        let loss = used.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(used).data(), &[1.0, 1.0]);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w.scale(1.0)), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn abs_gradient_is_sign() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[2.0, -2.0, 0.0]));
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[2, 1], &[10., 20.]));
        let y = a.mul(b).unwrap();
        assert_eq!(y.value().data(), &[10., 20., 30., 80., 100., 120.]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(b).data(), &[6., 15.]);
        assert_eq!(g.get(a).data(), &[10., 10., 10., 20., 20., 20.]);
    }

    #[test]
    fn broadcast_rejects_non_singleton_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 2]));
        assert!(a.add(b).is_err());
        let c = tape.leaf(Tensor::zeros([3]));
        assert!(a.add(c).is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([4]));
        assert_eq!(x.sigmoid().value().data(), &[0.5; 4]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.5, -2.0, 7.0]));
        let ones = tape.constant(Tensor::full([3], 1.0));
        assert_eq!(x.mul(ones).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([4]));
        assert_eq!(z.softmax(0).unwrap().value().data(), &[0.25; 4]);
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let big = tape.leaf(t(&[3], &[1001.0, 1002.0, 1003.0]));
        let a = x.softmax(0).unwrap().to_tensor();
        let b = big.softmax(0).unwrap().to_tensor();
        assert!(b.is_finite());
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn mean_axis_of_columns() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(x.mean_axis(1).unwrap().value().data(), &[1.5, 3.5]);
        assert_eq!(x.mean_axis(0).unwrap().value().data(), &[2.0, 3.0]);
        let empty = tape.leaf(Tensor::zeros([2, 0]));
        assert!(empty.mean_axis(1).is_err());
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        assert_eq!(a.matmul(eye).unwrap().value().data(), a.value().data());
        let bad = tape.constant(Tensor::zeros([2, 2]));
        assert!(a.matmul(bad).is_err());
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 4, 4]));
        let w = tape.leaf(Tensor::zeros([3, 5, 3, 3]));
        let err = x.conv2d(w, 1).unwrap_err().to_string();
        assert!(err.contains("C_in"), "{err}");
        let w5 = tape.leaf(Tensor::zeros([3, 2, 5, 5]));
        assert!(x.conv2d(w5, 1).is_err());
    }

    #[test]
    fn norm_last_zero_vector_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0., 0., 0., 3., 0., 4.]));
        let n = x.norm_last().unwrap();
        assert_eq!(n.value().data(), &[0.0, 5.0]);
        let g = tape.backward(n.sum()).unwrap();
        assert_eq!(g.get(x).data(), &[0., 0., 0., 0.6, 0., 0.8]);
    }

    #[test]
    fn gather_frames_permutes_rows() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 1], &[10., 11., 12.]));
        let y = x.gather_frames(Rc::new(vec![vec![2, 0, 1]])).unwrap();
        assert_eq!(y.value().data(), &[12., 10., 11.]);
    }
}

//! Reverse-mode differentiation over a recorded graph of tensor primitives.
//!
//! A [`Graph`] is an append-only list of nodes in forward execution order.
//! Each node keeps its value and whatever activations its adjoint needs, so
//! [`Graph::backward`] is a single reverse sweep with no recomputation.

use std::cell::RefCell;
use std::rc::Rc;

use crate::attention::ScopeMask;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, LayerNormSaved};
use crate::tensor::{Real, Tensor};

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Exp(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    AddRowBias(usize, usize),
    AddChannelBias(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        saved: LayerNormSaved<T>,
        beta: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    DepthwiseXcorr {
        template: usize,
        search: usize,
    },
    LocalScores {
        q: usize,
        k: usize,
        scope: Rc<ScopeMask>,
    },
    SegmentSoftmax {
        scores: usize,
        scope: Rc<ScopeMask>,
    },
    LocalMix {
        weights: usize,
        values: usize,
        scope: Rc<ScopeMask>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<T>,
    },
    IouLoss {
        reg: usize,
        cells: Vec<usize>,
        targets: Vec<[T; 4]>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`; `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |p: usize| -> &Tensor<T> { &nodes[p].value };
            let mut acc = |p: usize, data: Vec<T>| {
                let slot = &mut grads[p];
                match slot {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(data) {
                            *a += b;
                        }
                    }
                    None => {
                        *slot = Some(Tensor::new(nodes[p].value.shape(), data).expect("grad shape"))
                    }
                }
            };
            let gd = g.data();
            {
                match &node.op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        acc(*a, gd.to_vec());
                        acc(*b, gd.to_vec());
                    }
                    Op::Sub(a, b) => {
                        acc(*a, gd.to_vec());
                        acc(*b, gd.iter().map(|&x| -x).collect());
                    }
                    Op::Mul(a, b) => {
                        let (va, vb) = (val(*a).data(), val(*b).data());
                        acc(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                        acc(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                    }
                    Op::Scale(a, s) => acc(*a, gd.iter().map(|&x| x * *s).collect()),
                    Op::Relu(a) => {
                        let va = val(*a).data();
                        acc(
                            *a,
                            gd.iter()
                                .zip(va)
                                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                                .collect(),
                        );
                    }
                    Op::Exp(a) => {
                        let y = node.value.data();
                        acc(*a, gd.iter().zip(y).map(|(&g, &y)| g * y).collect());
                    }
                    Op::Reshape(a) => acc(*a, gd.to_vec()),
                    Op::Transpose(a) => acc(*a, g.transpose2()?.into_data()),
                    Op::MatMul(a, b) => {
                        let (ta, tb) = (val(*a), val(*b));
                        let (m, p) = ta.dims2()?;
                        let q = tb.dims2()?.1;
                        acc(*a, kernels::matmul_bt(gd, tb.data(), m, q, p));
                        acc(*b, kernels::matmul_at(ta.data(), gd, m, p, q));
                    }
                    Op::AddRowBias(x, b) => {
                        acc(*x, gd.to_vec());
                        let cols = val(*b).len();
                        let mut gb = vec![T::zero(); cols];
                        for row in gd.chunks(cols) {
                            for (acc_b, &v) in gb.iter_mut().zip(row) {
                                *acc_b += v;
                            }
                        }
                        acc(*b, gb);
                    }
                    Op::AddChannelBias(x, b) => {
                        acc(*x, gd.to_vec());
                        let c = val(*b).len();
                        let plane = gd.len() / c;
                        acc(
                            *b,
                            gd.chunks(plane).map(|p| p.iter().copied().sum()).collect(),
                        );
                    }
                    Op::Conv2d {
                        input,
                        kernel,
                        geom,
                    } => {
                        acc(
                            *input,
                            kernels::conv2d_grad_input(gd, val(*kernel).data(), geom),
                        );
                        acc(
                            *kernel,
                            kernels::conv2d_grad_kernel(gd, val(*input).data(), geom),
                        );
                    }
                    Op::SoftmaxRows(a) => {
                        let (_, cols) = node.value.dims2()?;
                        let mut gx = vec![T::zero(); gd.len()];
                        for ((y, gy), gx) in node
                            .value
                            .data()
                            .chunks(cols)
                            .zip(gd.chunks(cols))
                            .zip(gx.chunks_mut(cols))
                        {
                            kernels::softmax_grad_segment(y, gy, gx);
                        }
                        acc(*a, gx);
                    }
                    Op::LayerNorm {
                        x,
                        gamma,
                        beta,
                        saved,
                    } => {
                        let gm = val(*gamma).data();
                        let cols = gm.len();
                        let n = T::lit(cols as f64);
                        let mut gx = vec![T::zero(); gd.len()];
                        let mut gg = vec![T::zero(); cols];
                        let mut gb = vec![T::zero(); cols];
                        for r in 0..gd.len() / cols {
                            let span = r * cols..(r + 1) * cols;
                            let (gy, xh) = (&gd[span.clone()], &saved.xhat[span.clone()]);
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..cols {
                                let dxh = gy[j] * gm[j];
                                m1 += dxh;
                                m2 += dxh * xh[j];
                                gg[j] += gy[j] * xh[j];
                                gb[j] += gy[j];
                            }
                            m1 /= n;
                            m2 /= n;
                            for j in 0..cols {
                                gx[r * cols + j] =
                                    saved.rstd[r] * (gy[j] * gm[j] - m1 - xh[j] * m2);
                            }
                        }
                        acc(*x, gx);
                        acc(*gamma, gg);
                        acc(*beta, gb);
                    }
                    Op::ConcatRows(parts) => {
                        let mut at = 0;
                        for &p in parts {
                            let len = val(p).len();
                            acc(p, gd[at..at + len].to_vec());
                            at += len;
                        }
                    }
                    Op::ConcatCols(parts) => {
                        let (rows, total) = node.value.dims2()?;
                        let mut at = 0;
                        for &p in parts {
                            let cols = val(p).dims2()?.1;
                            let mut part = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                part.extend_from_slice(&gd[r * total + at..r * total + at + cols]);
                            }
                            acc(p, part);
                            at += cols;
                        }
                    }
                    Op::SliceCols { x, start } => {
                        let (rows, total) = val(*x).dims2()?;
                        let cols = node.value.dims2()?.1;
                        let mut gx = vec![T::zero(); rows * total];
                        for r in 0..rows {
                            gx[r * total + start..r * total + start + cols]
                                .copy_from_slice(&gd[r * cols..(r + 1) * cols]);
                        }
                        acc(*x, gx);
                    }
                    Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).len()]),
                    Op::Mean(a) => {
                        let n = val(*a).len();
                        acc(*a, vec![gd[0] / T::lit(n as f64); n]);
                    }
                    Op::DepthwiseXcorr { template, search } => {
                        let (z, x) = (val(*template), val(*search));
                        let (c, hz, wz) = z.dims3()?;
                        let (_, hx, wx) = x.dims3()?;
                        let (ho, wo) = (hx - hz + 1, wx - wz + 1);
                        let mut gz = vec![T::zero(); z.len()];
                        let mut gx = vec![T::zero(); x.len()];
                        for ch in 0..c {
                            for u in 0..hz {
                                for v in 0..wz {
                                    let zi = (ch * hz + u) * wz + v;
                                    let zv = z.data()[zi];
                                    let mut acc_z = T::zero();
                                    for y in 0..ho {
                                        for xx in 0..wo {
                                            let go = gd[(ch * ho + y) * wo + xx];
                                            let xi = (ch * hx + y + u) * wx + xx + v;
                                            acc_z += go * x.data()[xi];
                                            gx[xi] += go * zv;
                                        }
                                    }
                                    gz[zi] = acc_z;
                                }
                            }
                        }
                        acc(*template, gz);
                        acc(*search, gx);
                    }
                    Op::LocalScores { q, k, scope } => {
                        let (tq, tk) = (val(*q), val(*k));
                        let d = tq.dims2()?.1;
                        let mut gq = vec![T::zero(); tq.len()];
                        let mut gk = vec![T::zero(); tk.len()];
                        for i in 0..scope.len() {
                            for (e, &j) in scope.range(i).zip(scope.scope(i)) {
                                let ge = gd[e];
                                for l in 0..d {
                                    gq[i * d + l] += ge * tk.data()[j * d + l];
                                    gk[j * d + l] += ge * tq.data()[i * d + l];
                                }
                            }
                        }
                        acc(*q, gq);
                        acc(*k, gk);
                    }
                    Op::SegmentSoftmax { scores, scope } => {
                        let y = node.value.data();
                        let mut gx = vec![T::zero(); y.len()];
                        for i in 0..scope.len() {
                            let r = scope.range(i);
                            kernels::softmax_grad_segment(
                                &y[r.clone()],
                                &gd[r.clone()],
                                &mut gx[r],
                            );
                        }
                        acc(*scores, gx);
                    }
                    Op::LocalMix {
                        weights,
                        values,
                        scope,
                    } => {
                        let (tp, tv) = (val(*weights), val(*values));
                        let d = tv.dims2()?.1;
                        let mut gp = vec![T::zero(); tp.len()];
                        let mut gv = vec![T::zero(); tv.len()];
                        for i in 0..scope.len() {
                            let go = &gd[i * d..(i + 1) * d];
                            for (e, &j) in scope.range(i).zip(scope.scope(i)) {
                                let vj = &tv.data()[j * d..(j + 1) * d];
                                gp[e] = kernels::dot(go, vj);
                                let pe = tp.data()[e];
                                for l in 0..d {
                                    gv[j * d + l] += pe * go[l];
                                }
                            }
                        }
                        acc(*weights, gp);
                        acc(*values, gv);
                    }
                    Op::CrossEntropy {
                        logits,
                        labels,
                        probs,
                    } => {
                        let classes = val(*logits).shape()[0];
                        let cells = labels.len();
                        let scale = gd[0] / T::lit(cells as f64);
                        let mut gl = vec![T::zero(); classes * cells];
                        for (cell, &label) in labels.iter().enumerate() {
                            for k in 0..classes {
                                let p = probs[k * cells + cell];
                                let y = if k == label { T::one() } else { T::zero() };
                                gl[k * cells + cell] = scale * (p - y);
                            }
                        }
                        acc(*logits, gl);
                    }
                    Op::BceWithLogits { logits, targets } => {
                        let x = val(*logits);
                        let scale = gd[0] / T::lit(targets.len() as f64);
                        acc(
                            *logits,
                            x.data()
                                .iter()
                                .zip(targets)
                                .map(|(&x, &t)| scale * (sigmoid(x) - t))
                                .collect(),
                        );
                    }
                    Op::IouLoss {
                        reg,
                        cells,
                        targets,
                    } => {
                        let r = val(*reg);
                        let plane = r.len() / 4;
                        let mut gr = vec![T::zero(); r.len()];
                        if !cells.is_empty() {
                            let scale = gd[0] / T::lit(cells.len() as f64);
                            for (&cell, tgt) in cells.iter().zip(targets) {
                                let p = [0, 1, 2, 3].map(|s| r.data()[s * plane + cell]);
                                let parts = IouParts::new(p, *tgt);
                                // d(1 - IoU) = -dIoU
                                let d_inter = -(T::one() / parts.union
                                    + parts.inter / (parts.union * parts.union));
                                let d_area = parts.inter / (parts.union * parts.union);
                                let (pw, ph) = (p[0] + p[2], p[1] + p[3]);
                                for s in 0..4 {
                                    let beats = p[s] < tgt[s];
                                    let side = if s % 2 == 0 { parts.ih } else { parts.iw };
                                    let d_i = if beats { side } else { T::zero() };
                                    let d_a = if s % 2 == 0 { ph } else { pw };
                                    gr[s * plane + cell] = scale * (d_inter * d_i + d_area * d_a);
                                }
                            }
                        }
                        acc(*reg, gr);
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Intersection/union pieces for a (l, t, r, b) prediction against a target
/// measured from the same anchor point.
pub(crate) struct IouParts<T> {
    pub iw: T,
    pub ih: T,
    pub inter: T,
    pub union: T,
}

impl<T: Real> IouParts<T> {
    pub fn new(p: [T; 4], t: [T; 4]) -> Self {
        let iw = p[0].min(t[0]) + p[2].min(t[2]);
        let ih = p[1].min(t[1]) + p[3].min(t[3]);
        let inter = iw * ih;
        let area_p = (p[0] + p[2]) * (p[1] + p[3]);
        let area_t = (t[0] + t[2]) * (t[1] + t[3]);
        IouParts {
            iw,
            ih,
            inter,
            union: area_p + area_t - inter,
        }
    }

    pub fn iou(&self) -> T {
        self.inter / self.union
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient reaching `var`, if any path connects it to the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros when disconnected from the loss.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::contract("operands belong to different graphs"))
        }
    }

    fn elementwise(
        self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Self> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.graph.push(Tensor::new(a.shape(), data)?, op))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, s: T) -> Self {
        let v = self.value().map(|x| x * s);
        self.graph.push(v, Op::Scale(self.id, s))
    }

    pub fn relu(self) -> Self {
        let v = self.value().map(|x| x.max(T::zero()));
        self.graph.push(v, Op::Relu(self.id))
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(T::exp);
        self.graph.push(v, Op::Exp(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id)))
    }

    pub fn transpose(self) -> Result<Self> {
        let v = self.value().transpose2()?;
        Ok(self.graph.push(v, Op::Transpose(self.id)))
    }

    /// `self[m×p] · other[p×q]`
    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let (m, p) = a.dims2()?;
        let (p2, q) = b.dims2()?;
        if p != p2 {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let c = kernels::matmul(a.data(), b.data(), m, p, q);
        Ok(self
            .graph
            .push(Tensor::new(&[m, q], c)?, Op::MatMul(self.id, other.id)))
    }

    /// `self[n×c] + bias[c]` on every row.
    pub fn add_row_bias(self, bias: Var<'g, T>) -> Result<Self> {
        self.same_graph(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let (_, c) = x.dims2()?;
        if b.len() != c {
            return Err(Error::shape("add_row_bias", x.shape(), b.shape()));
        }
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&v, &bv)| v + bv))
            .collect();
        Ok(self.graph.push(
            Tensor::new(x.shape(), data)?,
            Op::AddRowBias(self.id, bias.id),
        ))
    }

    /// `self[C×H×W] + bias[C]` on every spatial position.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Result<Self> {
        self.same_graph(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let (c, h, w) = x.dims3()?;
        if b.len() != c {
            return Err(Error::shape("add_channel_bias", x.shape(), b.shape()));
        }
        let data = x
            .data()
            .chunks(h * w)
            .zip(b.data())
            .flat_map(|(plane, &bv)| plane.iter().map(move |&v| v + bv))
            .collect();
        Ok(self.graph.push(
            Tensor::new(x.shape(), data)?,
            Op::AddChannelBias(self.id, bias.id),
        ))
    }

    /// Cross-correlation of `self[C_in×H×W]` with `kernel[C_out×C_in×kh×kw]`.
    pub fn conv2d(self, kernel: Var<'g, T>, stride: usize, pad: usize) -> Result<Self> {
        self.same_graph(&kernel)?;
        let (x, k) = (self.value(), kernel.value());
        let input = x.dims3()?;
        let kdims = match k.shape() {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(Error::shape("conv2d", x.shape(), s)),
        };
        let geom = ConvGeom::new(input, kdims, stride, pad)?;
        let out = kernels::conv2d(x.data(), k.data(), &geom);
        Ok(self.graph.push(
            Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
        ))
    }

    /// Row softmax of a matrix. Entries equal to the masked sentinel (or −∞)
    /// get probability exactly 0.
    pub fn softmax_rows(self) -> Result<Self> {
        let x = self.value();
        let (m, n) = x.dims2()?;
        let y = kernels::softmax_rows(x.data(), m, n)?;
        Ok(self
            .graph
            .push(Tensor::new(&[m, n], y)?, Op::SoftmaxRows(self.id)))
    }

    /// Per-row normalization of `self[n×c]` followed by a per-channel affine map.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: T) -> Result<Self> {
        self.same_graph(&gamma)?;
        self.same_graph(&beta)?;
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let (rows, cols) = x.dims2()?;
        if g.len() != cols || b.len() != cols {
            return Err(Error::shape("layer_norm", x.shape(), g.shape()));
        }
        if eps <= T::zero() {
            return Err(Error::config("layer norm eps must be positive"));
        }
        let (y, saved) = kernels::layer_norm(x.data(), g.data(), b.data(), rows, cols, eps);
        Ok(self.graph.push(
            Tensor::new(&[rows, cols], y)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                saved,
            },
        ))
    }

    /// Concatenation along the leading axis (channels of a C×H×W map, rows
    /// of a matrix). Trailing dims must agree.
    pub fn concat_rows(parts: &[Var<'g, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_graph(p)?;
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", &first.shape(), v.shape()));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(first.graph.push(
            Tensor::new(&shape, data)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'g, T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = first.value().dims2()?.0;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_graph(p)?;
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", &first.shape(), v.shape()));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        Ok(first.graph.push(
            Tensor::new(&[rows, total], data)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::contract(format!(
                "column slice {start}..{} out of {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        Ok(self.graph.push(
            Tensor::new(&[rows, len], data)?,
            Op::SliceCols { x: self.id, start },
        ))
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let v = self.value();
        let s = v.sum() / T::lit(v.len() as f64);
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Valid per-channel cross-correlation of `search` (self) by `template`.
    pub fn depthwise_xcorr(self, template: Var<'g, T>) -> Result<Self> {
        self.same_graph(&template)?;
        let (x, z) = (self.value(), template.value());
        let (c, hx, wx) = x.dims3()?;
        let (cz, hz, wz) = z.dims3()?;
        if c != cz || hz > hx || wz > wx {
            return Err(Error::shape("depthwise_xcorr", z.shape(), x.shape()));
        }
        let out = kernels::depthwise_xcorr(z.data(), x.data(), c, (hz, wz), (hx, wx));
        Ok(self.graph.push(
            Tensor::new(&[c, hx - hz + 1, wx - wz + 1], out)?,
            Op::DepthwiseXcorr {
                template: template.id,
                search: self.id,
            },
        ))
    }

    /// Scores `q_i·k_j` for `j ∈ scope(i)`, one per CSR entry of `scope`.
    pub fn local_scores(self, keys: Var<'g, T>, scope: &Rc<ScopeMask>) -> Result<Self> {
        self.same_graph(&keys)?;
        let (q, k) = (self.value(), keys.value());
        let (n, d) = q.dims2()?;
        if k.shape() != q.shape() || n != scope.len() {
            return Err(Error::contract(format!(
                "local scores need q, k of equal shape n×d with n = {} (scope grid), got {:?} and {:?}",
                scope.len(),
                q.shape(),
                k.shape()
            )));
        }
        let s = kernels::local_scores(q.data(), k.data(), scope, (d, 0, d));
        Ok(self.graph.push(
            Tensor::new(&[scope.nnz()], s)?,
            Op::LocalScores {
                q: self.id,
                k: keys.id,
                scope: Rc::clone(scope),
            },
        ))
    }

    /// Softmax over each query's segment of a CSR score vector.
    pub fn segment_softmax(self, scope: &Rc<ScopeMask>) -> Result<Self> {
        let s = self.value();
        if s.len() != scope.nnz() {
            return Err(Error::shape("segment_softmax", s.shape(), &[scope.nnz()]));
        }
        let mut y = vec![T::zero(); s.len()];
        for i in 0..scope.len() {
            let r = scope.range(i);
            let seg = kernels::softmax_rows(&s.data()[r.clone()], 1, r.len())
                .map_err(|_| Error::DegenerateRow { row: i })?;
            y[r].copy_from_slice(&seg);
        }
        Ok(self.graph.push(
            Tensor::new(s.shape(), y)?,
            Op::SegmentSoftmax {
                scores: self.id,
                scope: Rc::clone(scope),
            },
        ))
    }

    /// Row `i` of the result is `Σ_{e ∈ scope(i)} w_e · v_{j(e)}`.
    pub fn local_mix(self, values: Var<'g, T>, scope: &Rc<ScopeMask>) -> Result<Self> {
        self.same_graph(&values)?;
        let (p, v) = (self.value(), values.value());
        let (n, d) = v.dims2()?;
        if p.len() != scope.nnz() || n != scope.len() {
            return Err(Error::shape("local_mix", p.shape(), v.shape()));
        }
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for (e, &j) in scope.range(i).zip(scope.scope(i)) {
                let pe = p.data()[e];
                for (o, &vj) in dst.iter_mut().zip(v.row(j)) {
                    *o += pe * vj;
                }
            }
        }
        Ok(self.graph.push(
            Tensor::new(&[n, d], out)?,
            Op::LocalMix {
                weights: self.id,
                values: values.id,
                scope: Rc::clone(scope),
            },
        ))
    }

    /// Mean softmax cross-entropy; the leading axis holds class logits and
    /// every remaining position is one sample.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let x = self.value();
        let classes = x.shape()[0];
        let cells = x.len() / classes;
        if labels.len() != cells || labels.iter().any(|&l| l >= classes) {
            return Err(Error::contract(format!(
                "cross entropy needs {cells} labels below {classes}"
            )));
        }
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (cell, &label) in labels.iter().enumerate() {
            let max = (0..classes)
                .map(|k| x.data()[k * cells + cell])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..classes {
                z += (x.data()[k * cells + cell] - max).exp();
            }
            for k in 0..classes {
                probs[k * cells + cell] = (x.data()[k * cells + cell] - max).exp() / z;
            }
            loss += z.ln() + max - x.data()[label * cells + cell];
        }
        loss /= T::lit(cells as f64);
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(self, targets: &[T]) -> Result<Self> {
        let x = self.value();
        if targets.len() != x.len() {
            return Err(Error::shape("bce_with_logits", x.shape(), &[targets.len()]));
        }
        let mut loss = T::zero();
        for (&v, &t) in x.data().iter().zip(targets) {
            loss += v.max(T::zero()) - v * t + (T::one() + (-v.abs()).exp()).ln();
        }
        loss /= T::lit(x.len() as f64);
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean `1 − IoU` between predicted (l, t, r, b) distances at `cells` of a
    /// `4×H×W` map and the matching targets. Zero when `cells` is empty.
    pub fn iou_loss(self, cells: &[usize], targets: &[[T; 4]]) -> Result<Self> {
        let r = self.value();
        if r.shape()[0] != 4 || cells.len() != targets.len() {
            return Err(Error::contract(format!(
                "iou loss needs a 4-channel map and one target per cell, got {:?}",
                r.shape()
            )));
        }
        let plane = r.len() / 4;
        if cells.iter().any(|&c| c >= plane) {
            return Err(Error::contract("iou loss cell index out of range"));
        }
        let mut loss = T::zero();
        for (&cell, tgt) in cells.iter().zip(targets) {
            let p = [0, 1, 2, 3].map(|s| r.data()[s * plane + cell]);
            loss += T::one() - IouParts::new(p, *tgt).iou();
        }
        if !cells.is_empty() {
            loss /= T::lit(cells.len() as f64);
        }
        Ok(self.graph.push(
            Tensor::scalar(loss),
            Op::IouLoss {
                reg: self.id,
                cells: cells.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]));
        let loss = x.sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
        assert_eq!(grads.wrt(loss).data(), &[1.0]);
    }

    #[test]
    fn matmul_adjoint_is_ones_times_bt() {
        let g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = g.leaf(t(&[3, 2], &[0.5, -1., 2., 0., 1., 3.]));
        let grads = g.backward(a.matmul(b).unwrap().sum()).unwrap();
        // ones(2×2)·Bᵀ: every row is the row sums of B
        let expect = [-0.5, 2.0, 4.0, -0.5, 2.0, 4.0];
        assert_eq!(grads.wrt(a).data(), &expect);
        // Aᵀ·ones(2×2): row l is the column sum of A
        assert_eq!(grads.wrt(b).data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]));
        let y = g.leaf(t(&[1], &[3.0]));
        let grads = g.backward(x.mul(x).unwrap().sum()).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y).data(), &[0.0]);
        assert_eq!(grads.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.add(x).unwrap().add(x.scale(3.0)).unwrap().sum();
        assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[5.0, 5.0]);
    }

    #[test]
    fn saturated_losses_near_zero() {
        let g = Graph::new();
        let logits = g.leaf(t(&[2, 2], &[20., -20., -20., 20.]));
        let ce = logits.cross_entropy(&[0, 1]).unwrap();
        assert!(ce.value().item() < 1e-6);
        let b = g.leaf(t(&[2], &[20., -20.]));
        let bce = b.bce_with_logits(&[1.0, 0.0]).unwrap();
        assert!(bce.value().item() < 1e-6);
        assert!(bce.value().item() >= 0.0);
    }

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::<f64>::zeros(&[2, 3, 3]));
        let ce = logits.cross_entropy(&[0, 1, 0, 1, 1, 0, 0, 0, 1]).unwrap();
        assert!((ce.value().item() - 2f64.ln()).abs() < 1e-15);
    }
}

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::conv::{self, ConvGeom};
use super::dense::Tensor;
use super::scalar::{matmul, Scalar};
use crate::error::{Error, Result};

/// `outer × len × inner` view of a tensor reduced along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisDims {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

impl AxisDims {
    pub fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    pub fn at(&self, o: usize, l: usize, i: usize) -> usize {
        (o * self.len + l) * self.inner + i
    }
}

/// `N × C × (spatial)` layout used by the channel statistics ops.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelDims {
    pub n: usize,
    pub c: usize,
    pub hw: usize,
}

impl ChannelDims {
    pub fn count(&self) -> usize {
        self.n * self.hw
    }

    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let s = (n * self.c + c) * self.hw;
        s..s + self.hw
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary<F> {
    Neg,
    Exp,
    Log,
    Sqrt,
    Cos,
    Acos,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(F),
    Clamp(F, F),
}

impl<F: Scalar> Unary<F> {
    pub fn apply(&self, x: F) -> F {
        match *self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Cos => x.cos(),
            Unary::Acos => x.acos(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => F::one() / (F::one() + (-x).exp()),
            Unary::Relu => x.max(F::zero()),
            Unary::LeakyRelu(s) => {
                if x > F::zero() {
                    x
                } else {
                    s * x
                }
            }
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(&self, x: F, y: F) -> F {
        let one = F::one();
        match *self {
            Unary::Neg => -one,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Sqrt => F::of(0.5) / y,
            Unary::Cos => -x.sin(),
            Unary::Acos => -one / (one - x * x).sqrt(),
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Relu => {
                if x > F::zero() {
                    one
                } else {
                    F::zero()
                }
            }
            Unary::LeakyRelu(s) => {
                if x > F::zero() {
                    one
                } else {
                    s
                }
            }
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    one
                } else {
                    F::zero()
                }
            }
        }
    }
}

pub(crate) enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, F),
    Offset(usize),
    Unary(usize, Unary<F>),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, AxisDims),
    Softmax(usize, AxisDims),
    LogSoftmax(usize, AxisDims),
    LogSumExp(usize, AxisDims),
    RepeatLast(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ChannelMean(usize, ChannelDims),
    ChannelVar {
        x: usize,
        mean: usize,
        dims: ChannelDims,
    },
    BnApply {
        x: usize,
        mean: usize,
        var: usize,
        gamma: usize,
        beta: usize,
        eps: F,
        dims: ChannelDims,
    },
    Upsample {
        x: usize,
        factor: usize,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    GlobalAvgPool {
        x: usize,
        hw: usize,
    },
    Reshape(usize),
    ConcatCols {
        a: usize,
        b: usize,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    GatherRows {
        table: usize,
        rows: Vec<usize>,
        width: usize,
    },
    Straight {
        x: usize,
        pass: Vec<bool>,
    },
}

pub(crate) struct Node<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub op: Op<F>,
    pub tracked: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Node ids are assigned in creation order, which is a topological order of
/// the graph, so the backward sweep simply walks ids in reverse.
pub struct Tape<F: Scalar = f32> {
    pub(crate) nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar = f32> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `tensor` as a leaf; it is differentiated iff it requires grad.
    pub fn leaf(&self, tensor: &Tensor<F>) -> Var<'_, F> {
        self.push_leaf(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    /// A leaf that always receives a gradient.
    pub fn param(&self, tensor: &Tensor<F>) -> Var<'_, F> {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor<F>) -> Var<'_, F> {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<F>) -> Result<Var<'_, F>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape().to_vec(), t.into_data(), false))
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<F>, tracked: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<F>,
        op: Op<F>,
        inputs: &[usize],
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let tracked = inputs.iter().any(|&i| nodes[i].tracked);
        nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<F>>> {
        self.nodes.borrow()
    }

    /// Differentiates the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Autodiff(
                "loss was recorded on a different tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.tracked {
            return Err(Error::Autodiff(
                "loss is detached: it depends on no differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![F::one()]);
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            let mut sink = Sink {
                nodes: &nodes,
                grads: &mut grads,
            };
            propagate(node, &g, &mut sink);
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    leaves: HashMap<usize, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.leaves.get(&var.id).map(Vec::as_slice)
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> Vec<F> {
        self.get(var)
            .map(<[F]>::to_vec)
            .unwrap_or_else(|| vec![F::zero(); var.numel()])
    }

    /// Adds the gradient of `var` into `tensor.grad`.
    pub fn accumulate_into(&self, var: Var<'_, F>, tensor: &mut Tensor<F>) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

struct Sink<'a, F> {
    nodes: &'a [Node<F>],
    grads: &'a mut [Option<Vec<F>>],
}

impl<F: Scalar> Sink<'_, F> {
    fn slot(&mut self, id: usize) -> Option<&mut Vec<F>> {
        if !self.nodes[id].tracked {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(self.grads[id].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes[id].tracked
    }

    fn add(&mut self, id: usize, g: &[F]) {
        if let Some(s) = self.slot(id) {
            s.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
}

fn propagate<'a, F: Scalar>(node: &Node<F>, g: &[F], sink: &mut Sink<'a, F>) {
    let nodes: &'a [Node<F>] = sink.nodes;
    let val = |id: usize| -> &'a [F] { &nodes[id].value };
    let out = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            sink.add(a, g);
            sink.add(b, g);
        }
        Op::Sub(a, b) => {
            sink.add(a, g);
            if let Some(s) = sink.slot(b) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if let Some(s) = sink.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] * vb[i];
                }
            }
            if let Some(s) = sink.slot(b) {
                for i in 0..s.len() {
                    s[i] += g[i] * va[i];
                }
            }
        }
        Op::Div(a, b) => {
            let vb = val(b);
            if let Some(s) = sink.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] / vb[i];
                }
            }
            if let Some(s) = sink.slot(b) {
                for i in 0..s.len() {
                    s[i] -= g[i] * out[i] / vb[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = sink.slot(a) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += c * g);
            }
        }
        Op::Offset(a) => sink.add(a, g),
        Op::Unary(a, f) => {
            let va = val(a);
            if let Some(s) = sink.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] * f.derivative(va[i], out[i]);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = sink.slot(a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = sink.slot(a) {
                let scale = g[0] / F::of(s.len() as f64);
                s.iter_mut().for_each(|s| *s += scale);
            }
        }
        Op::SumAxis(a, d) => {
            if let Some(s) = sink.slot(a) {
                for o in 0..d.outer {
                    for l in 0..d.len {
                        for i in 0..d.inner {
                            s[d.at(o, l, i)] += g[o * d.inner + i];
                        }
                    }
                }
            }
        }
        Op::Softmax(a, d) => {
            if let Some(s) = sink.slot(a) {
                for o in 0..d.outer {
                    for i in 0..d.inner {
                        let dot: F = (0..d.len)
                            .map(|l| g[d.at(o, l, i)] * out[d.at(o, l, i)])
                            .sum();
                        for l in 0..d.len {
                            let k = d.at(o, l, i);
                            s[k] += out[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(a, d) => {
            if let Some(s) = sink.slot(a) {
                for o in 0..d.outer {
                    for i in 0..d.inner {
                        let total: F = (0..d.len).map(|l| g[d.at(o, l, i)]).sum();
                        for l in 0..d.len {
                            let k = d.at(o, l, i);
                            s[k] += g[k] - out[k].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LogSumExp(a, d) => {
            let va = val(a);
            if let Some(s) = sink.slot(a) {
                for o in 0..d.outer {
                    for i in 0..d.inner {
                        let lse = out[o * d.inner + i];
                        let gi = g[o * d.inner + i];
                        for l in 0..d.len {
                            let k = d.at(o, l, i);
                            s[k] += gi * (va[k] - lse).exp();
                        }
                    }
                }
            }
        }
        Op::RepeatLast(a, times) => {
            if let Some(s) = sink.slot(a) {
                for (i, s) in s.iter_mut().enumerate() {
                    *s += g[i * times..(i + 1) * times].iter().copied().sum::<F>();
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (val(a), val(b));
            if let Some(s) = sink.slot(a) {
                matmul(g, false, vb, true, m, n, k, s, true);
            }
            if let Some(s) = sink.slot(b) {
                matmul(va, true, g, false, k, m, n, s, true);
            }
        }
        Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            let (vx, vw) = (val(x), val(w));
            if let Some(s) = sink.slot(x) {
                matmul(g, false, vw, false, rows, dout, din, s, true);
            }
            if let Some(s) = sink.slot(w) {
                matmul(g, true, vx, false, dout, rows, din, s, true);
            }
            if let Some(b) = b {
                if let Some(s) = sink.slot(b) {
                    for r in 0..rows {
                        for j in 0..dout {
                            s[j] += g[r * dout + j];
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let need = (
                sink.tracked(x),
                sink.tracked(w),
                b.is_some_and(|b| sink.tracked(b)),
            );
            let grads = conv::backward(&geom, val(x), val(w), g, need);
            if let Some(gx) = grads.x {
                sink.add(x, &gx);
            }
            if let Some(gw) = grads.w {
                sink.add(w, &gw);
            }
            if let (Some(b), Some(gb)) = (b, grads.b) {
                sink.add(b, &gb);
            }
        }
        Op::ChannelMean(x, d) => {
            if let Some(s) = sink.slot(x) {
                let inv = F::one() / F::of(d.count() as f64);
                for n in 0..d.n {
                    for c in 0..d.c {
                        let gc = g[c] * inv;
                        s[d.plane(n, c)].iter_mut().for_each(|v| *v += gc);
                    }
                }
            }
        }
        Op::ChannelVar { x, mean, dims: d } => {
            let (vx, vm) = (val(x), val(mean));
            let two_inv = F::of(2.0) / F::of(d.count() as f64);
            if let Some(s) = sink.slot(x) {
                for n in 0..d.n {
                    for c in 0..d.c {
                        let r = d.plane(n, c);
                        for i in r {
                            s[i] += g[c] * two_inv * (vx[i] - vm[c]);
                        }
                    }
                }
            }
            if let Some(s) = sink.slot(mean) {
                for c in 0..d.c {
                    let mut dev = F::zero();
                    for n in 0..d.n {
                        dev += vx[d.plane(n, c)].iter().map(|&v| v - vm[c]).sum::<F>();
                    }
                    s[c] -= g[c] * two_inv * dev;
                }
            }
        }
        Op::BnApply {
            x,
            mean,
            var,
            gamma,
            beta,
            eps,
            dims: d,
        } => {
            let vx = val(x);
            let vm = val(mean);
            let vv = val(var);
            let vg = val(gamma);
            let inv: Vec<F> = vv.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut sum_g = vec![F::zero(); d.c];
            let mut sum_gc = vec![F::zero(); d.c];
            for n in 0..d.n {
                for c in 0..d.c {
                    for i in d.plane(n, c) {
                        sum_g[c] += g[i];
                        sum_gc[c] += g[i] * (vx[i] - vm[c]);
                    }
                }
            }
            if let Some(s) = sink.slot(x) {
                for n in 0..d.n {
                    for c in 0..d.c {
                        let k = vg[c] * inv[c];
                        for i in d.plane(n, c) {
                            s[i] += g[i] * k;
                        }
                    }
                }
            }
            if let Some(s) = sink.slot(mean) {
                for c in 0..d.c {
                    s[c] -= sum_g[c] * vg[c] * inv[c];
                }
            }
            if let Some(s) = sink.slot(var) {
                for c in 0..d.c {
                    s[c] += sum_gc[c] * vg[c] * F::of(-0.5) * inv[c].powi(3);
                }
            }
            if let Some(s) = sink.slot(gamma) {
                for c in 0..d.c {
                    s[c] += sum_gc[c] * inv[c];
                }
            }
            if let Some(s) = sink.slot(beta) {
                for c in 0..d.c {
                    s[c] += sum_g[c];
                }
            }
        }
        Op::Upsample {
            x,
            factor,
            n,
            c,
            h,
            w,
        } => {
            if let Some(s) = sink.slot(x) {
                let (oh, ow) = (h * factor, w * factor);
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            s[p * h * w + (y / factor) * w + xx / factor] +=
                                g[p * oh * ow + y * ow + xx];
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { x, hw } => {
            if let Some(s) = sink.slot(x) {
                let inv = F::one() / F::of(hw as f64);
                for (p, &gp) in g.iter().enumerate() {
                    s[p * hw..(p + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += gp * inv);
                }
            }
        }
        Op::Reshape(x) => sink.add(x, g),
        Op::ConcatCols { a, b, rows, ca, cb } => {
            let width = ca + cb;
            if let Some(s) = sink.slot(a) {
                for r in 0..rows {
                    for j in 0..ca {
                        s[r * ca + j] += g[r * width + j];
                    }
                }
            }
            if let Some(s) = sink.slot(b) {
                for r in 0..rows {
                    for j in 0..cb {
                        s[r * cb + j] += g[r * width + ca + j];
                    }
                }
            }
        }
        Op::GatherRows {
            table,
            ref rows,
            width,
        } => {
            if let Some(s) = sink.slot(table) {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        s[r * width + j] += g[i * width + j];
                    }
                }
            }
        }
        Op::Straight { x, ref pass } => {
            if let Some(s) = sink.slot(x) {
                for i in 0..s.len() {
                    if pass[i] {
                        s[i] += g[i];
                    }
                }
            }
        }
    }
}

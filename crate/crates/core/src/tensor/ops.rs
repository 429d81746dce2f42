use super::conv::{self, Conv2dCfg, ConvGeom};
use super::dense::Tensor;
use super::scalar::{matmul, Scalar};
use super::tape::{AxisDims, ChannelDims, Op, Unary, Var};
use crate::error::{shape_err, Error, Result};

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    /// Whether any differentiable leaf feeds this value.
    pub fn is_tracked(&self) -> bool {
        self.tape.nodes()[self.id].tracked
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn value(&self) -> Tensor<F> {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// The single element of a scalar value.
    pub fn item(&self) -> F {
        let nodes = self.tape.nodes();
        debug_assert_eq!(nodes[self.id].value.len(), 1);
        nodes[self.id].value[0]
    }

    fn read<R>(&self, f: impl FnOnce(&[F], &[usize]) -> R) -> R {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        f(&n.value, &n.shape)
    }

    fn same_tape(&self, other: &Var<'t, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Autodiff("operands live on different tapes".into()))
        }
    }

    fn binary(
        &self,
        other: Var<'t, F>,
        name: &str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(shape_err!(
                    "{name}: shapes {:?} and {:?} differ",
                    a.shape,
                    b.shape
                ));
            }
            let v: Vec<F> = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (a.shape.clone(), v)
        };
        Ok(self.tape.push(shape, value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    /// Hadamard product.
    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        let (shape, value) = self.read(|v, s| (s.to_vec(), v.iter().map(|&x| x * c).collect()));
        self.tape
            .push(shape, value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: F) -> Var<'t, F> {
        let (shape, value) = self.read(|v, s| (s.to_vec(), v.iter().map(|&x| x + c).collect()));
        self.tape
            .push(shape, value, Op::Offset(self.id), &[self.id])
    }

    fn unary(&self, f: Unary<F>) -> Var<'t, F> {
        let (shape, value) =
            self.read(|v, s| (s.to_vec(), v.iter().map(|&x| f.apply(x)).collect()));
        self.tape
            .push(shape, value, Op::Unary(self.id, f), &[self.id])
    }

    pub fn neg(&self) -> Var<'t, F> {
        self.unary(Unary::Neg)
    }

    pub fn exp(&self) -> Var<'t, F> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t, F> {
        self.unary(Unary::Log)
    }

    pub fn sqrt(&self) -> Var<'t, F> {
        self.unary(Unary::Sqrt)
    }

    pub fn cos(&self) -> Var<'t, F> {
        self.unary(Unary::Cos)
    }

    pub fn acos(&self) -> Var<'t, F> {
        self.unary(Unary::Acos)
    }

    pub fn tanh(&self) -> Var<'t, F> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(&self) -> Var<'t, F> {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(&self, slope: F) -> Var<'t, F> {
        self.unary(Unary::LeakyRelu(slope))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: F, hi: F) -> Var<'t, F> {
        self.unary(Unary::Clamp(lo, hi))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let total = self.read(|v, _| v.iter().copied().sum());
        self.tape
            .push(vec![1], vec![total], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t, F> {
        let m = self.read(|v, _| v.iter().copied().sum::<F>() / F::of(v.len() as f64));
        self.tape
            .push(vec![1], vec![m], Op::Mean(self.id), &[self.id])
    }

    fn axis_dims(&self, axis: usize) -> Result<(Vec<usize>, AxisDims)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for shape {shape:?}"));
        }
        let d = AxisDims::of(&shape, axis);
        Ok((shape, d))
    }

    /// Sums along `axis`, removing it. A 1-D input reduces to shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, F>> {
        let (mut shape, d) = self.axis_dims(axis)?;
        let value = self.read(|v, _| {
            let mut out = vec![F::zero(); d.outer * d.inner];
            for o in 0..d.outer {
                for l in 0..d.len {
                    for i in 0..d.inner {
                        out[o * d.inner + i] += v[d.at(o, l, i)];
                    }
                }
            }
            out
        });
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self
            .tape
            .push(shape, value, Op::SumAxis(self.id, d), &[self.id]))
    }

    /// Per-lane `(max, Σ exp(v − max))`.
    fn lanes(v: &[F], d: AxisDims) -> Vec<(F, F)> {
        let mut out = Vec::with_capacity(d.outer * d.inner);
        for o in 0..d.outer {
            for i in 0..d.inner {
                let mx = (0..d.len)
                    .map(|l| v[d.at(o, l, i)])
                    .fold(F::neg_infinity(), F::max);
                let s: F = (0..d.len).map(|l| (v[d.at(o, l, i)] - mx).exp()).sum();
                out.push((mx, s));
            }
        }
        out
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let (shape, d) = self.axis_dims(axis)?;
        let value = self.read(|v, _| {
            let lanes = Self::lanes(v, d);
            let mut out = vec![F::zero(); v.len()];
            for o in 0..d.outer {
                for i in 0..d.inner {
                    let (mx, s) = lanes[o * d.inner + i];
                    for l in 0..d.len {
                        let k = d.at(o, l, i);
                        out[k] = (v[k] - mx).exp() / s;
                    }
                }
            }
            out
        });
        Ok(self
            .tape
            .push(shape, value, Op::Softmax(self.id, d), &[self.id]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let (shape, d) = self.axis_dims(axis)?;
        let value = self.read(|v, _| {
            let lanes = Self::lanes(v, d);
            let mut out = vec![F::zero(); v.len()];
            for o in 0..d.outer {
                for i in 0..d.inner {
                    let (mx, s) = lanes[o * d.inner + i];
                    for l in 0..d.len {
                        let k = d.at(o, l, i);
                        out[k] = (v[k] - mx) - s.ln();
                    }
                }
            }
            out
        });
        Ok(self
            .tape
            .push(shape, value, Op::LogSoftmax(self.id, d), &[self.id]))
    }

    /// `log Σ exp` along `axis`, removing it.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'t, F>> {
        let (mut shape, d) = self.axis_dims(axis)?;
        let value = self.read(|v, _| {
            Self::lanes(v, d)
                .into_iter()
                .map(|(mx, s)| mx + s.ln())
                .collect()
        });
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self
            .tape
            .push(shape, value, Op::LogSumExp(self.id, d), &[self.id]))
    }

    /// Appends a trailing axis of extent `times`, copying each element along it.
    pub fn repeat_last(&self, times: usize) -> Var<'t, F> {
        let (mut shape, value) = self.read(|v, s| {
            let out: Vec<F> = v
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, times))
                .collect();
            (s.to_vec(), out)
        });
        shape.push(times);
        self.tape
            .push(shape, value, Op::RepeatLast(self.id, times), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let value = self.to_vec();
        if shape.iter().product::<usize>() != value.len() || shape.contains(&0) {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            ));
        }
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), &[self.id]))
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: incompatible {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = {
            let nodes = self.tape.nodes();
            let mut out = vec![F::zero(); m * n];
            matmul(
                &nodes[self.id].value,
                false,
                &nodes[other.id].value,
                false,
                m,
                k,
                n,
                &mut out,
                false,
            );
            out
        };
        Ok(self.tape.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            &[self.id, other.id],
        ))
    }

    /// `x·Wᵀ + b` for `x: N×D`, `W: K×D`, `b: K`.
    pub fn linear(&self, weight: Var<'t, F>, bias: Option<Var<'t, F>>) -> Result<Var<'t, F>> {
        self.same_tape(&weight)?;
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err!(
                "linear: input {sx:?} incompatible with weight {sw:?}"
            ));
        }
        let (rows, din, dout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = bias {
            self.same_tape(&b)?;
            if b.shape() != [dout] {
                return Err(shape_err!(
                    "linear: bias {:?} for {dout} outputs",
                    b.shape()
                ));
            }
        }
        let value = {
            let nodes = self.tape.nodes();
            let mut out = vec![F::zero(); rows * dout];
            matmul(
                &nodes[self.id].value,
                false,
                &nodes[weight.id].value,
                true,
                rows,
                din,
                dout,
                &mut out,
                false,
            );
            if let Some(b) = bias {
                let bv = &nodes[b.id].value;
                for row in out.chunks_mut(dout) {
                    row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
                }
            }
            out
        };
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.tape.push(
            vec![rows, dout],
            value,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                rows,
                din,
                dout,
            },
            &inputs,
        ))
    }

    /// Cross-correlation of an NCHW input with an OIHW weight.
    pub fn conv2d(
        &self,
        weight: Var<'t, F>,
        bias: Option<Var<'t, F>>,
        cfg: Conv2dCfg,
    ) -> Result<Var<'t, F>> {
        self.same_tape(&weight)?;
        let geom = ConvGeom::resolve(&self.shape(), &weight.shape(), cfg)?;
        if let Some(b) = bias {
            self.same_tape(&b)?;
            if b.shape() != [geom.c_out] {
                return Err(shape_err!(
                    "conv2d: bias {:?} for {} outputs",
                    b.shape(),
                    geom.c_out
                ));
            }
        }
        let value = {
            let nodes = self.tape.nodes();
            conv::forward(
                &geom,
                &nodes[self.id].value,
                &nodes[weight.id].value,
                bias.map(|b| nodes[b.id].value.as_slice()),
            )
        };
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.tape.push(
            vec![geom.n, geom.c_out, geom.ho, geom.wo],
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            &inputs,
        ))
    }

    fn channel_dims(&self) -> Result<ChannelDims> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(shape_err!("channel op needs at least N×C, got {s:?}"));
        }
        let d = ChannelDims {
            n: s[0],
            c: s[1],
            hw: s[2..].iter().product(),
        };
        if d.count() == 0 {
            return Err(Error::Degenerate("zero batch·spatial size".into()));
        }
        Ok(d)
    }

    /// Per-channel mean over batch and spatial positions.
    pub fn channel_mean(&self) -> Result<Var<'t, F>> {
        let d = self.channel_dims()?;
        let value = self.read(|v, _| {
            let inv = F::one() / F::of(d.count() as f64);
            (0..d.c)
                .map(|c| {
                    (0..d.n)
                        .map(|n| v[d.plane(n, c)].iter().copied().sum::<F>())
                        .sum::<F>()
                        * inv
                })
                .collect()
        });
        Ok(self
            .tape
            .push(vec![d.c], value, Op::ChannelMean(self.id, d), &[self.id]))
    }

    /// Per-channel biased variance around `mean`.
    pub fn channel_var(&self, mean: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&mean)?;
        let d = self.channel_dims()?;
        if mean.shape() != [d.c] {
            return Err(shape_err!(
                "channel_var: mean {:?} for {} channels",
                mean.shape(),
                d.c
            ));
        }
        let value = {
            let nodes = self.tape.nodes();
            let (v, m) = (&nodes[self.id].value, &nodes[mean.id].value);
            let inv = F::one() / F::of(d.count() as f64);
            (0..d.c)
                .map(|c| {
                    let ss: F = (0..d.n)
                        .map(|n| {
                            v[d.plane(n, c)]
                                .iter()
                                .map(|&x| (x - m[c]) * (x - m[c]))
                                .sum::<F>()
                        })
                        .sum();
                    ss * inv
                })
                .collect()
        };
        Ok(self.tape.push(
            vec![d.c],
            value,
            Op::ChannelVar {
                x: self.id,
                mean: mean.id,
                dims: d,
            },
            &[self.id, mean.id],
        ))
    }

    /// `γ·(x − μ)/√(σ² + ε) + β` with per-channel operands.
    pub fn bn_apply(
        &self,
        mean: Var<'t, F>,
        var: Var<'t, F>,
        gamma: Var<'t, F>,
        beta: Var<'t, F>,
        eps: F,
    ) -> Result<Var<'t, F>> {
        let d = self.channel_dims()?;
        for (name, p) in [
            ("mean", mean),
            ("var", var),
            ("gamma", gamma),
            ("beta", beta),
        ] {
            self.same_tape(&p)?;
            if p.shape() != [d.c] {
                return Err(shape_err!(
                    "batch_norm: {name} {:?} for {} channels",
                    p.shape(),
                    d.c
                ));
            }
        }
        if eps <= F::zero() {
            return Err(Error::Config("batch_norm eps must be positive".into()));
        }
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id];
            let (m, v, g, b) = (
                &nodes[mean.id].value,
                &nodes[var.id].value,
                &nodes[gamma.id].value,
                &nodes[beta.id].value,
            );
            let mut out = vec![F::zero(); x.value.len()];
            for c in 0..d.c {
                let k = g[c] / (v[c] + eps).sqrt();
                for n in 0..d.n {
                    for i in d.plane(n, c) {
                        out[i] = (x.value[i] - m[c]) * k + b[c];
                    }
                }
            }
            (x.shape.clone(), out)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::BnApply {
                x: self.id,
                mean: mean.id,
                var: var.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
                dims: d,
            },
            &[self.id, mean.id, var.id, gamma.id, beta.id],
        ))
    }

    fn nchw(&self, what: &str) -> Result<[usize; 4]> {
        let s = self.shape();
        <[usize; 4]>::try_from(s.as_slice())
            .map_err(|_| shape_err!("{what} needs NCHW input, got {s:?}"))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'t, F>> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be ≥ 1".into()));
        }
        let [n, c, h, w] = self.nchw("upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let value = self.read(|v, _| {
            let mut out = vec![F::zero(); n * c * oh * ow];
            for p in 0..n * c {
                for y in 0..oh {
                    for x in 0..ow {
                        out[p * oh * ow + y * ow + x] =
                            v[p * h * w + (y / factor) * w + x / factor];
                    }
                }
            }
            out
        });
        Ok(self.tape.push(
            vec![n, c, oh, ow],
            value,
            Op::Upsample {
                x: self.id,
                factor,
                n,
                c,
                h,
                w,
            },
            &[self.id],
        ))
    }

    /// Spatial mean, NCHW → N×C.
    pub fn global_avg_pool(&self) -> Result<Var<'t, F>> {
        let [n, c, h, w] = self.nchw("global_avg_pool")?;
        let hw = h * w;
        let value = self.read(|v, _| {
            let inv = F::one() / F::of(hw as f64);
            v.chunks(hw)
                .map(|p| p.iter().copied().sum::<F>() * inv)
                .collect()
        });
        Ok(self.tape.push(
            vec![n, c],
            value,
            Op::GlobalAvgPool { x: self.id, hw },
            &[self.id],
        ))
    }

    /// Column-wise concatenation of two N×A and N×B matrices.
    pub fn concat_cols(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(shape_err!("concat_cols: {sa:?} and {sb:?}"));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let mut out = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
            }
            out
        };
        Ok(self.tape.push(
            vec![rows, ca + cb],
            value,
            Op::ConcatCols {
                a: self.id,
                b: other.id,
                rows,
                ca,
                cb,
            },
            &[self.id, other.id],
        ))
    }

    /// Row lookup into a 2-D table (embedding).
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t, F>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(shape_err!("gather_rows needs a 2-D table, got {s:?}"));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(shape_err!("row {r} out of range for table {s:?}"));
        }
        let width = s[1];
        let value = self.read(|v, _| {
            rows.iter()
                .flat_map(|&r| v[r * width..(r + 1) * width].iter().copied())
                .collect()
        });
        Ok(self.tape.push(
            vec![rows.len(), width],
            value,
            Op::GatherRows {
                table: self.id,
                rows: rows.to_vec(),
                width,
            },
            &[self.id],
        ))
    }

    /// Replaces the forward value with `forward` while passing the upstream
    /// gradient through unchanged wherever `pass` is set (straight-through).
    pub fn straight_through(&self, forward: Vec<F>, pass: Vec<bool>) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if forward.len() != self.numel() || pass.len() != self.numel() {
            return Err(shape_err!(
                "straight_through: buffers do not match {shape:?}"
            ));
        }
        Ok(self.tape.push(
            shape,
            forward,
            Op::Straight { x: self.id, pass },
            &[self.id],
        ))
    }
}

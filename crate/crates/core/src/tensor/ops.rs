//! Primitive operations: forward evaluation on the tape and their
//! vector-Jacobian products.
//!
//! Shape rules, all row-major:
//! - `matmul`: `[m,k] x [k,n] -> [m,n]`; `batch_matmul`: `[b,m,k] x [b,k,n] -> [b,m,n]`
//! - `add`/`mul`: equal rank, one operand may have size-1 dims broadcast into the other
//! - `reduce_*(axis)`: keeps the reduced axis with size 1
//! - `conv2d`: `[n,c,h,w] x [o,c,kh,kw] (+ [o]) -> [n,o,h',w']` with zero padding and
//!   `h' = floor((h + 2p - kh) / s) + 1`
//! - `group_norm`: `[n,c,...]` with `gamma`, `beta` of shape `[c]`, `c % groups == 0`
//! - `cross_entropy`: `[n,c]` logits and `n` labels to a scalar mean loss

use super::broadcast::BroadcastPlan;
use super::conv::{col2im, conv_out_len, im2col, ConvGeom};
use super::gemm::gemm;
use super::tape::{accumulate, grad_slot, Op, Tape, Var};
use super::{numel, Scalar, Tensor};
use crate::error::{invalid, shape_err, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `[outer, len, inner]` view around `axis`.
fn axis_view(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer = &out_shape[..rank - 1];
    let mut idx = vec![0usize; outer.len()];
    let mut off = 0usize;
    let outer_count: usize = outer.iter().product();
    for _ in 0..outer_count {
        for i in 0..inner {
            out.push(data[off + i * inner_stride]);
        }
        for d in (0..outer.len()).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < outer[d] {
                break;
            }
            off -= src_strides[d] * outer[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(shape_err("conv2d", format!("input {xs:?} with kernel {ws:?}")));
    }
    let out_h = conv_out_len(xs[2], ws[2], stride, pad);
    let out_w = conv_out_len(xs[3], ws[3], stride, pad);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) => Ok(ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            out_h,
            out_w,
        }),
        _ => Err(shape_err(
            "conv2d",
            format!("kernel {ws:?} does not fit input {xs:?} with stride {stride}, pad {pad}"),
        )),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, T::zero());
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b })
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        self.push("batch_matmul", Tensor::from_parts(vec![bt, m, n], out), Op::BatchMatMul { a, b })
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, BroadcastPlan)> {
        if let Some(plan) = BroadcastPlan::new(self.shape(a), self.shape(b)) {
            Ok((a, b, plan))
        } else if let Some(plan) = BroadcastPlan::new(self.shape(b), self.shape(a)) {
            Ok((b, a, plan))
        } else {
            Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))))
        }
    }

    /// Elementwise sum; a size-1 dimension of either operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (full, small, plan) = self.broadcast_pair("add", a, b)?;
        let mut out = self.value(full).data().to_vec();
        let sd = self.value(small).data();
        plan.for_each_run(|fo, so, len, step| {
            for i in 0..len {
                out[fo + i] += sd[so + i * step];
            }
        });
        let shape = self.shape(full).to_vec();
        self.push("add", Tensor::from_parts(shape, out), Op::Add { a: full, b: small })
    }

    /// Elementwise product; a size-1 dimension of either operand broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (full, small, plan) = self.broadcast_pair("mul", a, b)?;
        let mut out = self.value(full).data().to_vec();
        let sd = self.value(small).data();
        plan.for_each_run(|fo, so, len, step| {
            for i in 0..len {
                out[fo + i] *= sd[so + i * step];
            }
        });
        let shape = self.shape(full).to_vec();
        self.push("mul", Tensor::from_parts(shape, out), Op::Mul { a: full, b: small })
    }

    /// Broadcasts `x` (size-1 dims) to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let plan = BroadcastPlan::new(shape, self.shape(x))
            .ok_or_else(|| shape_err("expand", format!("{:?} -> {shape:?}", self.shape(x))))?;
        let mut out = vec![T::zero(); numel(shape)];
        let xd = self.value(x).data();
        plan.for_each_run(|fo, so, len, step| {
            for i in 0..len {
                out[fo + i] = xd[so + i * step];
            }
        });
        self.push("expand", Tensor::from_parts(shape.to_vec(), out), Op::Expand { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        self.push("scale", value, Op::Scale { x, factor: f })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", value, Op::Sigmoid { x })
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.sin());
        self.push("sin", value, Op::Sin { x })
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.cos());
        self.push("cos", value, Op::Cos { x })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err("softmax", "scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_row(row);
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x })
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("reduce_mean", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_view(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let scale = T::one() / T::from_f64(len as f64);
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push("reduce_mean", Tensor::from_parts(oshape, out), Op::ReduceMean { x, axis })
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("reduce_max", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_view(&shape, axis);
        let xd = self.value(x).data();
        let mut out = xd[..0].to_vec();
        out.reserve(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&xd[base..base + inner]);
            argmax.extend(std::iter::repeat_n(0usize, inner));
            let dst = &mut out[o * inner..(o + 1) * inner];
            let arg = &mut argmax[o * inner..(o + 1) * inner];
            for l in 1..len {
                let src = &xd[base + l * inner..base + (l + 1) * inner];
                for i in 0..inner {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        arg[i] = l;
                    }
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push(
            "reduce_max",
            Tensor::from_parts(oshape, out),
            Op::ReduceMax { x, axis, argmax },
        )
    }

    /// Sum of all entries as a scalar of shape `[]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_view(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(oshape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("perm {perm:?} for {shape:?}")));
        }
        let (oshape, out) = permute_data(self.value(x).data(), &shape, perm);
        self.push(
            "permute",
            Tensor::from_parts(oshape, out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let g = conv_geom(&xs, &ws, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} filters", self.shape(b), ws[0])));
            }
        }
        let (n, cout) = (xs[0], ws[0]);
        let (k, p) = (g.col_rows(), g.col_cols());
        let in_len = g.channels * g.height * g.width;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for s in 0..n {
            let xs_ = &xd[s * in_len..(s + 1) * in_len];
            let colm: &[T] = if g.is_pointwise() {
                xs_
            } else {
                im2col(xs_, &g, &mut cols);
                &cols
            };
            gemm(cout, k, p, wd, false, colm, false, &mut out[s * cout * p..(s + 1) * cout * p], T::zero());
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for plane in out.chunks_mut(p).enumerate() {
                let bias = bd[plane.0 % cout];
                for v in plane.1 {
                    *v += bias;
                }
            }
        }
        let shape = vec![n, cout, g.out_h, g.out_w];
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    /// Non-overlapping `k x k` average pooling (stride `k`, no padding).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || k == 0 || xs[2] < k || xs[3] < k {
            return Err(shape_err("avg_pool2d", format!("{xs:?} with window {k}")));
        }
        let (oh, ow) = (xs[2] / k, xs[3] / k);
        let (h, w) = (xs[2], xs[3]);
        let xd = self.value(x).data();
        let inv = T::one() / T::from_f64((k * k) as f64);
        let mut out = vec![T::zero(); xs[0] * xs[1] * oh * ow];
        for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                        for &v in row {
                            acc += v;
                        }
                    }
                    dst[oy * ow + ox] = acc * inv;
                }
            }
        }
        self.push(
            "avg_pool2d",
            Tensor::from_parts(vec![xs[0], xs[1], oh, ow], out),
            Op::AvgPool2d { x, k },
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return Err(shape_err("group_norm", format!("{xs:?} in {groups} groups")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let spatial: usize = xs[2..].iter().product();
        let cpg = c / groups;
        let glen = cpg * spatial;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let eps = T::from_f64(eps);
        let ngroups = xs[0] * groups;
        let mut mean = Vec::with_capacity(ngroups);
        let mut rstd = Vec::with_capacity(ngroups);
        let mut out = vec![T::zero(); xd.len()];
        let inv_len = T::one() / T::from_f64(glen as f64);
        for gi in 0..ngroups {
            let src = &xd[gi * glen..(gi + 1) * glen];
            let mu = src.iter().copied().sum::<T>() * inv_len;
            let var = src.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_len;
            let r = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            let dst = &mut out[gi * glen..(gi + 1) * glen];
            for ci in 0..cpg {
                let ch = (gi % groups) * cpg + ci;
                let (ga, be) = (gd[ch], bd[ch]);
                for j in 0..spatial {
                    let idx = ci * spatial + j;
                    dst[idx] = (src[idx] - mu) * r * ga + be;
                }
            }
        }
        self.push(
            "group_norm",
            Tensor::from_parts(xs, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// evaluated with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err("cross_entropy", format!("logits {s:?} with {} labels", labels.len())));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += (lse - row[y]).as_f64();
            softmax_row(row);
        }
        let loss = T::from_f64(total / labels.len() as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `x @ w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let out = self.shape(b).to_vec();
        let b2 = self.reshape(b, &[1, numel(&out)])?;
        self.add(y, b2)
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

/// Propagates `g` (gradient of node `i`) into the node's inputs.
pub(crate) fn backprop<T: Scalar>(
    tape: &Tape<T>,
    i: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let node = &tape.nodes[i];
    let out = &node.value;
    let val = |v: Var| tape.value(v);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(ga) = grad_slot(tape, grads, *a) {
                gemm(m, n, k, g.data(), false, val(*b).data(), true, ga.data_mut(), T::one());
            }
            if let Some(gb) = grad_slot(tape, grads, *b) {
                gemm(k, m, n, val(*a).data(), true, g.data(), false, gb.data_mut(), T::one());
            }
        }
        Op::BatchMatMul { a, b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if let Some(ga) = grad_slot(tape, grads, *a) {
                let bd = val(*b).data();
                for t in 0..bt {
                    gemm(
                        m,
                        n,
                        k,
                        &g.data()[t * m * n..],
                        false,
                        &bd[t * k * n..],
                        true,
                        &mut ga.data_mut()[t * m * k..(t + 1) * m * k],
                        T::one(),
                    );
                }
            }
            if let Some(gb) = grad_slot(tape, grads, *b) {
                let ad = val(*a).data();
                for t in 0..bt {
                    gemm(
                        k,
                        m,
                        n,
                        &ad[t * m * k..],
                        true,
                        &g.data()[t * m * n..],
                        false,
                        &mut gb.data_mut()[t * k * n..(t + 1) * k * n],
                        T::one(),
                    );
                }
            }
        }
        Op::Add { a, b } => {
            accumulate(tape, grads, *a, g.clone());
            if let Some(gb) = grad_slot(tape, grads, *b) {
                let plan = BroadcastPlan::new(out.shape(), val(*b).shape()).expect("planned in forward");
                let gbd = gb.data_mut();
                plan.for_each_run(|fo, so, len, step| {
                    for j in 0..len {
                        gbd[so + j * step] += g.data()[fo + j];
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            let plan = BroadcastPlan::new(out.shape(), val(*b).shape()).expect("planned in forward");
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if tape.requires_grad(*a) {
                let mut ga = g.data().to_vec();
                plan.for_each_run(|fo, so, len, step| {
                    for j in 0..len {
                        ga[fo + j] *= bd[so + j * step];
                    }
                });
                accumulate(tape, grads, *a, Tensor::from_parts(out.shape().to_vec(), ga));
            }
            if let Some(gb) = grad_slot(tape, grads, *b) {
                let gbd = gb.data_mut();
                plan.for_each_run(|fo, so, len, step| {
                    for j in 0..len {
                        gbd[so + j * step] += g.data()[fo + j] * ad[fo + j];
                    }
                });
            }
        }
        Op::Expand { x } => {
            if let Some(gx) = grad_slot(tape, grads, *x) {
                let plan = BroadcastPlan::new(out.shape(), val(*x).shape()).expect("planned in forward");
                let gxd = gx.data_mut();
                plan.for_each_run(|fo, so, len, step| {
                    for j in 0..len {
                        gxd[so + j * step] += g.data()[fo + j];
                    }
                });
            }
        }
        Op::Scale { x, factor } => {
            let f = *factor;
            accumulate(tape, grads, *x, g.map(|v| v * f));
        }
        Op::Relu { x } => {
            let xd = val(*x).data();
            let d = g.data().iter().zip(xd).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() });
            accumulate(tape, grads, *x, Tensor::from_parts(g.shape().to_vec(), d.collect()));
        }
        Op::Sigmoid { x } => {
            let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y * (T::one() - y));
            accumulate(tape, grads, *x, Tensor::from_parts(g.shape().to_vec(), d.collect()));
        }
        Op::Sin { x } => {
            let d = g.data().iter().zip(val(*x).data()).map(|(&gv, &xv)| gv * xv.cos());
            accumulate(tape, grads, *x, Tensor::from_parts(g.shape().to_vec(), d.collect()));
        }
        Op::Cos { x } => {
            let d = g.data().iter().zip(val(*x).data()).map(|(&gv, &xv)| -gv * xv.sin());
            accumulate(tape, grads, *x, Tensor::from_parts(g.shape().to_vec(), d.collect()));
        }
        Op::Softmax { x } => {
            let cols = *out.shape().last().expect("non-scalar");
            let mut d = vec![T::zero(); g.len()];
            for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.data().chunks(cols)).zip(out.data().chunks(cols)) {
                let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    drow[j] = yrow[j] * (grow[j] - dot);
                }
            }
            accumulate(tape, grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
        }
        Op::ReduceMean { x, axis } => {
            if let Some(gx) = grad_slot(tape, grads, *x) {
                let (outer, len, inner) = axis_view(val(*x).shape(), *axis);
                let scale = T::one() / T::from_f64(len as f64);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut gxd[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s * scale;
                        }
                    }
                }
            }
        }
        Op::ReduceMax { x, axis, argmax } => {
            if let Some(gx) = grad_slot(tape, grads, *x) {
                let (outer, len, inner) = axis_view(val(*x).shape(), *axis);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let l = argmax[o * inner + j];
                        gxd[(o * len + l) * inner + j] += g.data()[o * inner + j];
                    }
                }
            }
        }
        Op::SumAll { x } => {
            let gv = g.data()[0];
            accumulate(tape, grads, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_view(out.shape(), *axis);
            let mut start = 0;
            for &v in inputs {
                let len = val(v).shape()[*axis];
                if let Some(gv) = grad_slot(tape, grads, v) {
                    let gvd = gv.data_mut();
                    for o in 0..outer {
                        let src = &g.data()[(o * total + start) * inner..(o * total + start + len) * inner];
                        for (d, &s) in gvd[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                start += len;
            }
        }
        Op::Reshape { x } => {
            let shape = val(*x).shape().to_vec();
            accumulate(tape, grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
        }
        Op::Permute { x, perm } => {
            let inv = inverse_perm(perm);
            let (shape, d) = permute_data(g.data(), g.shape(), &inv);
            accumulate(tape, grads, *x, Tensor::from_parts(shape, d));
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = val(*x).shape();
            let ws = val(*w).shape();
            let geo = conv_geom(xs, ws, *stride, *pad)?;
            let (n, cout) = (xs[0], ws[0]);
            let (k, p) = (geo.col_rows(), geo.col_cols());
            let in_len = geo.channels * geo.height * geo.width;
            let gd = g.data();
            if let Some(b) = b {
                if let Some(gb) = grad_slot(tape, grads, *b) {
                    let gbd = gb.data_mut();
                    for (plane, src) in gd.chunks(p).enumerate() {
                        gbd[plane % cout] += src.iter().copied().sum::<T>();
                    }
                }
            }
            let need_w = tape.requires_grad(*w);
            let need_x = tape.requires_grad(*x);
            if need_w {
                let xd = val(*x).data();
                let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
                let gw = grad_slot(tape, grads, *w).expect("requires grad");
                for s in 0..n {
                    let xs_ = &xd[s * in_len..(s + 1) * in_len];
                    let colm: &[T] = if geo.is_pointwise() {
                        xs_
                    } else {
                        im2col(xs_, &geo, &mut cols);
                        &cols
                    };
                    gemm(cout, p, k, &gd[s * cout * p..], false, colm, true, gw.data_mut(), T::one());
                }
            }
            if need_x {
                let wd = val(*w).data();
                let gx = grad_slot(tape, grads, *x).expect("requires grad");
                let gxd = gx.data_mut();
                let mut dcols = vec![T::zero(); k * p];
                for s in 0..n {
                    let dst = &mut gxd[s * in_len..(s + 1) * in_len];
                    if geo.is_pointwise() {
                        gemm(k, cout, p, wd, true, &gd[s * cout * p..], false, dst, T::one());
                    } else {
                        gemm(k, cout, p, wd, true, &gd[s * cout * p..], false, &mut dcols, T::zero());
                        col2im(&dcols, &geo, dst);
                    }
                }
            }
        }
        Op::AvgPool2d { x, k } => {
            if let Some(gx) = grad_slot(tape, grads, *x) {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::from_f64((k * k) as f64);
                let gxd = gx.data_mut();
                for (plane, src) in g.data().chunks(oh * ow).enumerate() {
                    let dst = &mut gxd[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = src[oy * ow + ox] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    dst[(oy * k + dy) * w + ox * k + dx] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            mean,
            rstd,
        } => {
            let xs = val(*x).shape();
            let c = xs[1];
            let spatial: usize = xs[2..].iter().product();
            let cpg = c / groups;
            let glen = cpg * spatial;
            let xd = val(*x).data();
            let gad = val(*gamma).data();
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let need_x = tape.requires_grad(*x);
            let mut dx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
            let inv_len = T::one() / T::from_f64(glen as f64);
            for gi in 0..mean.len() {
                let (mu, r) = (mean[gi], rstd[gi]);
                let base = gi * glen;
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for ci in 0..cpg {
                    let ch = (gi % groups) * cpg + ci;
                    for j in 0..spatial {
                        let idx = base + ci * spatial + j;
                        let xhat = (xd[idx] - mu) * r;
                        dgamma[ch] += gd[idx] * xhat;
                        dbeta[ch] += gd[idx];
                        let dxh = gd[idx] * gad[ch];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat;
                    }
                }
                if need_x {
                    let m1 = sum_dxhat * inv_len;
                    let m2 = sum_dxhat_xhat * inv_len;
                    for ci in 0..cpg {
                        let ch = (gi % groups) * cpg + ci;
                        for j in 0..spatial {
                            let idx = base + ci * spatial + j;
                            let xhat = (xd[idx] - mu) * r;
                            dx[idx] = r * (gd[idx] * gad[ch] - m1 - xhat * m2);
                        }
                    }
                }
            }
            if need_x {
                accumulate(tape, grads, *x, Tensor::from_parts(xs.to_vec(), dx));
            }
            accumulate(tape, grads, *gamma, Tensor::from_parts(vec![c], dgamma));
            accumulate(tape, grads, *beta, Tensor::from_parts(vec![c], dbeta));
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let s = val(*logits).shape();
            let c = s[1];
            let scale = g.data()[0] / T::from_f64(labels.len() as f64);
            let mut d = probs.clone();
            for (row, &y) in d.chunks_mut(c).zip(labels) {
                row[y] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            accumulate(tape, grads, *logits, Tensor::from_parts(s.to_vec(), d));
        }
    }
    Ok(())
}

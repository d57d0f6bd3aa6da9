//! Differentiable primitives. Every primitive's backward rule in
//! `autodiff.rs` is written in terms of these same primitives, so gradients
//! can be differentiated again.

use super::kernels::{self, ConvDims};
use super::tensor::{numel, Op, Tensor};
use super::GraphError;

type Result<T> = std::result::Result<T, GraphError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> GraphError {
    GraphError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

fn can_broadcast(from: &[usize], to: &[usize]) -> bool {
    from.len() <= to.len()
        && from.iter().rev().zip(to.iter().rev()).all(|(&f, &t)| f == t || f == 1)
}

fn normalize_axis(op: &'static str, axis: isize, rank: usize, shape: &[usize]) -> Result<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    if a < 0 || a as usize >= rank {
        return Err(GraphError::BadAxis { op, axis, shape: shape.to_vec() });
    }
    Ok(a as usize)
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out = broadcast_shape(op.tag(), self.shape(), rhs.shape())?;
        let data = kernels::zip_broadcast(self.data(), self.shape(), rhs.data(), rhs.shape(), &out, f);
        Ok(Tensor::from_op(data, out, op, vec![self.clone(), rhs.clone()]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone()])
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(c), |a| a + c)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |a| if a > 0.0 { a } else { 0.0 })
    }

    /// `max(x, floor)` elementwise; the gradient is passed only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(Op::ClampMin(floor), |a| if a > floor { a } else { floor })
    }

    /// Sums over broadcast dimensions so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if !can_broadcast(shape, self.shape()) {
            return Err(mismatch("sum_to", self.shape(), shape));
        }
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Ok(Tensor::from_op(data, shape.to_vec(), Op::SumTo, vec![self.clone()]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if !can_broadcast(self.shape(), shape) {
            return Err(mismatch("broadcast_to", self.shape(), shape));
        }
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Ok(Tensor::from_op(data, shape.to_vec(), Op::BroadcastTo, vec![self.clone()]))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[]).expect("scalar target always broadcasts")
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over one axis, keeping it with length 1.
    pub fn sum_axis(&self, axis: isize) -> Result<Tensor> {
        let a = normalize_axis("sum_axis", axis, self.rank(), self.shape())?;
        let mut target = self.shape().to_vec();
        target[a] = 1;
        self.sum_to(&target)
    }

    pub fn mean_axis(&self, axis: isize) -> Result<Tensor> {
        let a = normalize_axis("mean_axis", axis, self.rank(), self.shape())?;
        let n = self.shape()[a] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.rank()];
        if perm.len() != self.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", self.shape(), perm));
        }
        let (data, shape) = kernels::permute(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(data, shape, Op::Permute(perm.to_vec()), vec![self.clone()]))
    }

    /// Transpose of a matrix.
    pub fn t(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(mismatch("transpose", self.shape(), &[]));
        }
        self.permute(&[1, 0])
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(mismatch("matmul", a, b));
        }
        let data = kernels::matmul(self.data(), rhs.data(), a[0], a[1], b[1]);
        Ok(Tensor::from_op(data, vec![a[0], b[1]], Op::MatMul, vec![self.clone(), rhs.clone()]))
    }

    /// Same-padded, stride-1 2-D cross-correlation with an odd square kernel.
    /// `self [B,Cin,H,W]`, `weight [Cout,Cin,k,k]`.
    pub fn conv2d(&self, weight: &Tensor) -> Result<Tensor> {
        let (x, w) = (self.shape(), weight.shape());
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || w[2] % 2 == 0 {
            return Err(mismatch("conv2d", x, w));
        }
        let d = ConvDims { batch: x[0], cin: x[1], cout: w[0], h: x[2], w: x[3], k: w[2] };
        let data = kernels::conv2d(self.data(), weight.data(), d);
        Ok(Tensor::from_op(data, vec![d.batch, d.cout, d.h, d.w], Op::Conv2d, vec![self.clone(), weight.clone()]))
    }

    /// Input-adjoint of [`conv2d`](Self::conv2d): `self [B,Cout,H,W]` -> `[B,Cin,H,W]`.
    pub fn conv2d_bwd_data(&self, weight: &Tensor) -> Result<Tensor> {
        let (g, w) = (self.shape(), weight.shape());
        if g.len() != 4 || w.len() != 4 || w[0] != g[1] || w[2] != w[3] {
            return Err(mismatch("conv2d_bwd_data", g, w));
        }
        let d = ConvDims { batch: g[0], cin: w[1], cout: w[0], h: g[2], w: g[3], k: w[2] };
        let data = kernels::conv2d_bwd_data(self.data(), weight.data(), d);
        Ok(Tensor::from_op(data, vec![d.batch, d.cin, d.h, d.w], Op::ConvBwdData, vec![self.clone(), weight.clone()]))
    }

    /// Filter-adjoint of [`conv2d`](Self::conv2d): `self [B,Cin,H,W]`, `g [B,Cout,H,W]` -> `[Cout,Cin,k,k]`.
    pub fn conv2d_bwd_filter(&self, g: &Tensor, k: usize) -> Result<Tensor> {
        let (x, gs) = (self.shape(), g.shape());
        if x.len() != 4 || gs.len() != 4 || x[0] != gs[0] || x[2] != gs[2] || x[3] != gs[3] || k % 2 == 0 {
            return Err(mismatch("conv2d_bwd_filter", x, gs));
        }
        let d = ConvDims { batch: x[0], cin: x[1], cout: gs[1], h: x[2], w: x[3], k };
        let data = kernels::conv2d_bwd_filter(self.data(), g.data(), d);
        Ok(Tensor::from_op(data, vec![d.cout, d.cin, k, k], Op::ConvBwdFilter(k), vec![self.clone(), g.clone()]))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(GraphError::Empty("concat"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(GraphError::BadAxis { op: "concat", axis: axis as isize, shape: first.shape().to_vec() });
        }
        let mut out = first.shape().to_vec();
        out[axis] = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != rank || (0..rank).any(|i| i != axis && s[i] != first.shape()[i]) {
                return Err(mismatch("concat", first.shape(), s));
            }
            out[axis] += s[axis];
        }
        let outer: usize = out[..axis].iter().product();
        let inner: usize = out[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(data, out, Op::Concat(axis), parts.to_vec()))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(GraphError::BadAxis { op: "narrow", axis: axis as isize, shape: s.to_vec() });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out = s.to_vec();
        out[axis] = len;
        Ok(Tensor::from_op(data, out, Op::Narrow { axis, start }, vec![self.clone()]))
    }

    /// Zero-pads along `axis` so that `self` occupies `[start, start+len)` of a length-`total` axis.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + s[axis] > total {
            return Err(GraphError::BadAxis { op: "pad_axis", axis: axis as isize, shape: s.to_vec() });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let mut data = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut out = s.to_vec();
        out[axis] = total;
        Ok(Tensor::from_op(data, out, Op::PadAxis { axis, start }, vec![self.clone()]))
    }

    fn spatial(&self, op: &'static str, f: usize, shrink: bool) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() < 2 || f == 0 || (shrink && (s[s.len() - 1] % f != 0 || s[s.len() - 2] % f != 0)) {
            return Err(GraphError::BadFactor { op, factor: f, shape: s.to_vec() });
        }
        let lead = s[..s.len() - 2].iter().product();
        Ok((lead, s[s.len() - 2], s[s.len() - 1]))
    }

    fn with_spatial(&self, h: usize, w: usize) -> Vec<usize> {
        let mut out = self.shape().to_vec();
        let r = out.len();
        out[r - 2] = h;
        out[r - 1] = w;
        out
    }

    /// Sum over non-overlapping `f x f` blocks of the last two dims.
    pub fn sum_pool(&self, f: usize) -> Result<Tensor> {
        let (lead, h, w) = self.spatial("sum_pool", f, true)?;
        let data = kernels::sum_pool(self.data(), lead, h, w, f);
        Ok(Tensor::from_op(data, self.with_spatial(h / f, w / f), Op::SumPool(f), vec![self.clone()]))
    }

    pub fn avg_pool(&self, f: usize) -> Result<Tensor> {
        Ok(self.sum_pool(f)?.scale(1.0 / (f * f) as f64))
    }

    pub fn upsample_nearest(&self, f: usize) -> Result<Tensor> {
        let (lead, h, w) = self.spatial("upsample_nearest", f, false)?;
        let data = kernels::upsample(self.data(), lead, h, w, f);
        Ok(Tensor::from_op(data, self.with_spatial(h * f, w * f), Op::Upsample(f), vec![self.clone()]))
    }

    pub fn downsample_nearest(&self, f: usize) -> Result<Tensor> {
        let (lead, h, w) = self.spatial("downsample_nearest", f, true)?;
        let data = kernels::subsample(self.data(), lead, h, w, f);
        Ok(Tensor::from_op(data, self.with_spatial(h / f, w / f), Op::Subsample(f), vec![self.clone()]))
    }

    pub(crate) fn scatter_up(&self, f: usize) -> Result<Tensor> {
        let (lead, h, w) = self.spatial("scatter_up", f, false)?;
        let data = kernels::scatter_up(self.data(), lead, h, w, f);
        Ok(Tensor::from_op(data, self.with_spatial(h * f, w * f), Op::ScatterUp(f), vec![self.clone()]))
    }

    /// Per-slice maximum along `axis` as a constant (used only for shifting).
    fn max_axis_const(&self, axis: usize) -> Tensor {
        let s = self.shape();
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis];
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    let v = self.data()[(o * len + a) * inner + i];
                    let slot = &mut out[o * inner + i];
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = 1;
        Tensor::new(out, &shape).expect("shape built from data")
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Result<Tensor> {
        let a = normalize_axis("softmax", axis, self.rank(), self.shape())?;
        let e = self.sub(&self.max_axis_const(a))?.exp();
        e.div(&e.sum_axis(a as isize)?)
    }

    pub fn log_softmax(&self, axis: isize) -> Result<Tensor> {
        let a = normalize_axis("log_softmax", axis, self.rank(), self.shape())?;
        let z = self.sub(&self.max_axis_const(a))?;
        z.sub(&z.exp().sum_axis(a as isize)?.ln())
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&self, axis: isize, eps: f64) -> Result<Tensor> {
        let ss = self.mul(self)?.sum_axis(axis)?;
        let norm = ss.clamp_min(eps * eps).sqrt();
        self.div(&norm)
    }

    /// `log(max(x, floor))`
    pub fn safe_ln(&self, floor: f64) -> Tensor {
        self.clamp_min(floor).ln()
    }
}

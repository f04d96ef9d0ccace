use super::{conv, Op, Tape, Var};
use crate::tensor::{self, Result, Tensor, TensorError};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x).map(f);
        self.push(v, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_to(b, &shape)?;
        self.add(a, b)
    }

    /// `a * b` with `b` broadcast to the shape of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_to(b, &shape)?;
        self.mul(a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    /// Batched product of `[g, m, k]` and `[g, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            tensor::gemm(
                m,
                k,
                n,
                1.0,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(Tensor::new(&[g, m, n], out)?, Op::BatchMatMul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// `max(x, floor)`; gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        self.push(v, Op::Permute(x, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose_last",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let idx = tensor::broadcast_index(self.shape(x), shape)?;
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape, data)?, Op::BroadcastTo(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, op: &'static str, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = tensor::axis_split(&shape, axis, op)?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (a, b) in buf.iter_mut().enumerate() {
                    *b = xd[(o * n + a) * inner + i];
                }
                out.push(f(&buf));
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Tensor::new(&new_shape, out)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, "sum_axis", |b| b.iter().sum())?;
        self.push(v, Op::SumAxis(x, axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, "mean_axis", |b| b.iter().sum::<f64>() / b.len() as f64)?;
        self.push(v, Op::MeanAxis(x, axis))
    }

    /// Population variance over `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(x, axis, "var_axis", |b| {
            let m = b.iter().sum::<f64>() / b.len() as f64;
            b.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / b.len() as f64
        })?;
        self.push(v, Op::VarAxis(x, axis))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = softmax_tensor(self.value(x), axis, false)?;
        self.push(v, Op::Softmax(x, axis))
    }

    /// `(x - c) - ln Σ exp(x - c)` with `c` the max along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = softmax_tensor(self.value(x), axis, true)?;
        self.push(v, Op::LogSoftmax(x, axis))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = tensor::axis_split(&shape, axis, "slice")?;
        if start >= end || end > n {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} invalid for axis length {n}"),
            });
        }
        let len = end - start;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&xd[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Tensor::new(&out_shape, data)?, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = tensor::axis_split(&base, axis, "concat")?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let xd = self.value(x).data();
                data.extend_from_slice(&xd[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        self.push(Tensor::new(&out_shape, data)?, Op::Concat { xs: xs.to_vec(), axis })
    }

    /// 3-D convolution of `x: [B, C_in, T, H, W]` with `w: [C_out, C_in, kt, kh, kw]`,
    /// stride 1 and zero "same" padding (odd kernel extents only).
    pub fn conv3d(&mut self, x: Var, w: Var) -> Result<Var> {
        let v = conv::conv3d_forward(self.value(x), self.value(w))?;
        self.push(v, Op::Conv3d(x, w))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let dim = *xv.shape().last().unwrap();
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let rows = xv.len() / dim;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let xd = xv.data();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xd[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * gd[j] + bd[j];
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        self.push(v, Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        })
    }
}

pub(crate) fn softmax_tensor(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, n, inner) = tensor::axis_split(x.shape(), axis, "softmax")?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let c = (0..n).map(|a| xd[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..n {
                let e = (xd[at(a)] - c).exp();
                out[at(a)] = e;
                z += e;
            }
            if log {
                let lz = z.ln();
                for a in 0..n {
                    out[at(a)] = (xd[at(a)] - c) - lz;
                }
            } else {
                for a in 0..n {
                    out[at(a)] /= z;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

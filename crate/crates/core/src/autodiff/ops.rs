use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// `c = op(a) · op(b) + beta · c` with `a` logically `[m, k]` and `b` logically `[k, n]`.
/// A transposed operand is stored in the opposite orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a = if trans_a {
        ArrayView2::from_shape((k, m), a).expect("gemm lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm lhs")
    };
    let b = if trans_b {
        ArrayView2::from_shape((n, k), b).expect("gemm rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm rhs")
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm out");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `expm1(z) / z`, the ZOH input-gain factor, with its removable singularity filled.
pub fn zoh_phi(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

pub(crate) fn zoh_phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Splits `dims` around `axis` into (outer, size, inner).
pub(crate) fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.dims(a).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::from_parts(v.shape().clone(), data);
        self.push(out, op)
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().clone(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).shape().last();
        if self.dims(b) != [n] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.dims(x).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| a + bias[i % n])
            .collect();
        let out = Tensor::from_parts(v.shape().clone(), data);
        self.push(out, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Neg(x), |a| -a)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                reason: "argument must be positive".into(),
            });
        }
        self.map_unary(x, Op::Log(x), f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Softplus(x), softplus)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Silu(x), |a| a * sigmoid(a))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Abs(x), f64::abs)
    }

    /// `x^c` for `x >= 0` and `c >= 1`.
    pub fn powf(&mut self, x: Var, c: f64) -> Result<Var> {
        if c < 1.0 || self.value(x).data().iter().any(|&a| a < 0.0) {
            return Err(Error::Domain {
                op: "powf",
                reason: "needs non-negative base and exponent >= 1".into(),
            });
        }
        self.map_unary(x, Op::Powf(x, c), |a| a.powf(c))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map_unary(x, Op::Clamp(x, lo, hi), |a| a.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: da,
                rhs: db,
            });
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.count_macs((m * k * n) as u64);
        self.push(Tensor::from_parts(Shape::new(&[m, n])?, out), Op::Matmul(a, b))
    }

    /// Affine map over the last axis: `x · W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().clone();
        let wd = self.dims(w).to_vec();
        if wd.len() != 2 || wd[0] != xs.last() || xs.rank() == 0 {
            return Err(Error::Dimension {
                op: "linear",
                lhs: xs.dims().to_vec(),
                rhs: wd,
            });
        }
        let (rows, fan_in, fan_out) = (xs.rows(), wd[0], wd[1]);
        if let Some(b) = b {
            if self.dims(b) != [fan_out] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: wd,
                    rhs: self.dims(b).to_vec(),
                });
            }
        }
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, fan_in, fan_out, self.value(x).data(), false, self.value(w).data(), false, &mut out, beta);
        self.count_macs((rows * fan_in * fan_out) as u64);
        let shape = xs.with_last(fan_out)?;
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b })
    }

    /// Batched product `a[i] · b[i]` (or `a[i] · b[i]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let bad = || Error::Dimension {
            op: "bmm",
            lhs: da.clone(),
            rhs: db.clone(),
        };
        if da.len() != 3 || db.len() != 3 || da[0] != db[0] {
            return Err(bad());
        }
        let (batch, m, k) = (da[0], da[1], da[2]);
        let (kb, n) = if trans_b { (db[2], db[1]) } else { (db[1], db[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.count_macs((batch * m * k * n) as u64);
        self.push(
            Tensor::from_parts(Shape::new(&[batch, m, n])?, out),
            Op::Bmm { a, b, trans_b },
        )
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        self.push(out, Op::Reshape(x))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let d = self.dims(x).to_vec();
        if d.len() != 4 {
            return Err(Error::Dimension {
                op: "transpose12",
                lhs: d,
                rhs: vec![],
            });
        }
        let out = transpose12_data(self.value(x).data(), [d[0], d[1], d[2], d[3]]);
        let shape = Shape::new(&[d[0], d[2], d[1], d[3]])?;
        self.push(Tensor::from_parts(shape, out), Op::Transpose12(x))
    }

    /// Row-wise softmax over the last axis. Masked entries (`false`) are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let v = self.value(x);
        if let Some(m) = &mask {
            if m.len() != v.numel() {
                return Err(Error::Dimension {
                    op: "softmax mask",
                    lhs: v.dims().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let n = v.shape().last();
        let mut out = vec![0.0; v.numel()];
        for (r, (row, dst)) in v.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| mask.as_ref().is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            dst.iter_mut().for_each(|e| *e /= total);
        }
        let shape = v.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.shape().last();
        let mut out = vec![0.0; v.numel()];
        for (row, dst) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            for (d, a) in dst.iter_mut().zip(row) {
                *d = a - lse;
            }
        }
        let shape = v.shape().clone();
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x))
    }

    /// Selects rows along axis 0; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let v = self.value(x);
        let dims = v.dims().to_vec();
        if dims.is_empty() {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: dims,
                rhs: vec![index.len()],
            });
        }
        let rows = dims[0];
        let width: usize = dims[1..].iter().product();
        let mut out = vec![0.0; index.len() * width];
        for (dst, idx) in out.chunks_mut(width.max(1)).zip(index) {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(Error::Contract(format!("gather index {i} >= {rows} rows")));
                }
                dst.copy_from_slice(&v.data()[i * width..(i + 1) * width]);
            }
        }
        let mut out_dims = dims;
        out_dims[0] = index.len();
        let shape = Shape::new(&out_dims)?;
        self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                index: index.into(),
            },
        )
    }

    /// Adds row `i` of `x` into output row `index[i]`; `None` rows are dropped.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[Option<usize>], rows: usize) -> Result<Var> {
        let v = self.value(x);
        let dims = v.dims().to_vec();
        if dims.is_empty() || dims[0] != index.len() {
            return Err(Error::Dimension {
                op: "scatter_add_rows",
                lhs: dims,
                rhs: vec![index.len()],
            });
        }
        let width: usize = dims[1..].iter().product();
        let mut out = vec![0.0; rows * width];
        for (src, idx) in v.data().chunks(width.max(1)).zip(index) {
            if let Some(i) = *idx {
                if i >= rows {
                    return Err(Error::Contract(format!("scatter index {i} >= {rows} rows")));
                }
                for (d, s) in out[i * width..(i + 1) * width].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_dims = dims;
        out_dims[0] = rows;
        let shape = Shape::new(&out_dims)?;
        self.push(
            Tensor::from_parts(shape, out),
            Op::ScatterAddRows {
                x,
                index: index.into(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(Error::Empty("mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or(Error::Empty("concat of zero tensors"))?;
        let base = self.dims(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let d = self.dims(v);
            let compatible = d.len() == base.len()
                && d.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: d.to_vec(),
                });
            }
            total += d[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let size = self.dims(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * size * inner..(o + 1) * size * inner]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let shape = Shape::new(&dims)?;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: dims,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, size, inner) = axis_split(&dims, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let shape = Shape::new(&out_dims)?;
        self.push(Tensor::from_parts(shape, out), Op::Narrow { x, axis, start })
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).shape().last();
        for p in [gain, bias] {
            if self.dims(p) != [n] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.dims(x).to_vec(),
                    rhs: self.dims(p).to_vec(),
                });
            }
        }
        let v = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = v.shape().rows();
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = v.shape().clone();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Euclidean norm of each last-axis row; the output drops the last axis.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let dims = v.dims().to_vec();
        if dims.is_empty() {
            return Err(Error::Dimension {
                op: "row_norm",
                lhs: dims,
                rhs: vec![],
            });
        }
        let n = v.shape().last();
        let out: Vec<f64> = if n == 0 {
            vec![0.0; v.shape().rows()]
        } else {
            v.data()
                .chunks(n)
                .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
                .collect()
        };
        let shape = Shape::new(&dims[..dims.len() - 1])?;
        self.push(Tensor::from_parts(shape, out), Op::RowNorm(x))
    }

    /// `scores[g, m, i, j] + sign · gamma[g, i, m] · dist[g, i, j]`.
    pub fn distance_bias(&mut self, scores: Var, gamma: Var, dist: Rc<Tensor>, sign: f64) -> Result<Var> {
        let sd = self.dims(scores).to_vec();
        let gd = self.dims(gamma).to_vec();
        let ok = sd.len() == 4
            && sd[2] == sd[3]
            && gd == [sd[0], sd[2], sd[1]]
            && dist.dims() == [sd[0], sd[2], sd[3]];
        if !ok {
            return Err(Error::Dimension {
                op: "distance_bias",
                lhs: sd,
                rhs: gd,
            });
        }
        let (groups, heads, len) = (sd[0], sd[1], sd[2]);
        let s = self.value(scores).data();
        let gv = self.value(gamma).data();
        let d = dist.data();
        let mut out = s.to_vec();
        for g in 0..groups {
            for m in 0..heads {
                for i in 0..len {
                    let gamma_v = sign * gv[(g * len + i) * heads + m];
                    let row = ((g * heads + m) * len + i) * len;
                    let drow = (g * len + i) * len;
                    for j in 0..len {
                        out[row + j] += gamma_v * d[drow + j];
                    }
                }
            }
        }
        let shape = Shape::new(&sd)?;
        self.push(
            Tensor::from_parts(shape, out),
            Op::DistanceBias {
                scores,
                gamma,
                dist,
                sign,
            },
        )
    }

    /// Depthwise causal convolution over the sequence axis of `x: [G, L, C]`
    /// with `w: [C, K]` and `b: [C]`; position `t` sees inputs `t-K+1 ..= t`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 3 || wd.len() != 2 || wd[0] != xd[2] || self.dims(b) != [xd[2]] {
            return Err(Error::Dimension {
                op: "causal_conv",
                lhs: xd,
                rhs: wd,
            });
        }
        let (groups, len, ch, width) = (xd[0], xd[1], xd[2], wd[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; xv.len()];
        for g in 0..groups {
            for t in 0..len {
                let dst = &mut out[(g * len + t) * ch..(g * len + t + 1) * ch];
                dst.copy_from_slice(bv);
                for k in 0..width {
                    let Some(src_t) = (t + k + 1).checked_sub(width) else {
                        continue;
                    };
                    let src = &xv[(g * len + src_t) * ch..(g * len + src_t + 1) * ch];
                    for c in 0..ch {
                        dst[c] += wv[c * width + k] * src[c];
                    }
                }
            }
        }
        self.count_macs((groups * len * ch * width) as u64);
        let shape = Shape::new(&xd)?;
        self.push(Tensor::from_parts(shape, out), Op::CausalConv { x, w, b })
    }

    /// ZOH state transition `exp(Δ·A)` for diagonal `a: [C, S]` and step sizes `delta: [G, L, C]`.
    pub fn zoh_a(&mut self, a: Var, delta: Var) -> Result<Var> {
        let (ad, dd) = (self.dims(a).to_vec(), self.dims(delta).to_vec());
        check_zoh_dims(&ad, &dd, None)?;
        check_positive_steps(self.value(delta))?;
        let (groups, len, ch, state) = (dd[0], dd[1], dd[2], ad[1]);
        let (av, dv) = (self.value(a).data(), self.value(delta).data());
        let mut out = vec![0.0; groups * len * ch * state];
        for tok in 0..groups * len {
            for c in 0..ch {
                let step = dv[tok * ch + c];
                let base = (tok * ch + c) * state;
                for s in 0..state {
                    out[base + s] = (step * av[c * state + s]).exp();
                }
            }
        }
        let shape = Shape::new(&[groups, len, ch, state])?;
        self.push(Tensor::from_parts(shape, out), Op::ZohA { a, delta })
    }

    /// ZOH input gain `(exp(Δ·A) − 1)·Δ·B / (Δ·A)`, falling back to `Δ·B` when `|Δ·A| < 1e-8`.
    pub fn zoh_b(&mut self, a: Var, b: Var, delta: Var) -> Result<Var> {
        let (ad, bd, dd) = (self.dims(a).to_vec(), self.dims(b).to_vec(), self.dims(delta).to_vec());
        check_zoh_dims(&ad, &dd, Some(&bd))?;
        check_positive_steps(self.value(delta))?;
        let (groups, len, ch, state) = (dd[0], dd[1], dd[2], ad[1]);
        let (av, bv, dv) = (self.value(a).data(), self.value(b).data(), self.value(delta).data());
        let mut out = vec![0.0; groups * len * ch * state];
        for tok in 0..groups * len {
            for c in 0..ch {
                let step = dv[tok * ch + c];
                let base = (tok * ch + c) * state;
                for s in 0..state {
                    let z = step * av[c * state + s];
                    out[base + s] = zoh_phi(z) * step * bv[tok * state + s];
                }
            }
        }
        let shape = Shape::new(&[groups, len, ch, state])?;
        self.push(Tensor::from_parts(shape, out), Op::ZohB { a, b, delta })
    }

    /// Sequential selective scan over `x: [G, L, C]`:
    /// `h_t = ā_t ⊙ h_{t−1} + b̄_t · x_t`, `y_t[c] = Σ_s c_t[s] · h_t[c, s]`, with `h_0 = 0`.
    pub fn selective_scan(&mut self, x: Var, abar: Var, bbar: Var, c: Var) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let ad = self.dims(abar).to_vec();
        let ok = xd.len() == 3
            && ad.len() == 4
            && ad[..3] == xd[..]
            && self.dims(bbar) == ad.as_slice()
            && self.dims(c) == [xd[0], xd[1], ad[3]];
        if !ok {
            return Err(Error::Dimension {
                op: "selective_scan",
                lhs: xd,
                rhs: ad,
            });
        }
        let (groups, len, ch, state) = (xd[0], xd[1], xd[2], ad[3]);
        let (xv, av, bv, cv) = (
            self.value(x).data(),
            self.value(abar).data(),
            self.value(bbar).data(),
            self.value(c).data(),
        );
        let mut states = vec![0.0; groups * len * ch * state];
        let mut out = vec![0.0; groups * len * ch];
        for g in 0..groups {
            for t in 0..len {
                let tok = g * len + t;
                for ci in 0..ch {
                    let base = (tok * ch + ci) * state;
                    let xin = xv[tok * ch + ci];
                    let mut acc = 0.0;
                    for s in 0..state {
                        let prev = if t == 0 { 0.0 } else { states[base - ch * state + s] };
                        let h = av[base + s] * prev + bv[base + s] * xin;
                        states[base + s] = h;
                        acc += cv[tok * state + s] * h;
                    }
                    out[tok * ch + ci] = acc;
                }
            }
        }
        self.count_macs((3 * groups * len * ch * state) as u64);
        let shape = Shape::new(&xd)?;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Scan {
                x,
                abar,
                bbar,
                c,
                states,
            },
        )
    }
}

fn check_zoh_dims(a: &[usize], delta: &[usize], b: Option<&[usize]>) -> Result<()> {
    let ok = a.len() == 2
        && delta.len() == 3
        && delta[2] == a[0]
        && b.is_none_or(|b| b == [delta[0], delta[1], a[1]]);
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension {
            op: "zoh_discretize",
            lhs: a.to_vec(),
            rhs: delta.to_vec(),
        })
    }
}

fn check_positive_steps(delta: &Tensor) -> Result<()> {
    if delta.data().iter().any(|&d| d <= 0.0) {
        return Err(Error::Domain {
            op: "zoh_discretize",
            reason: "step size must be positive".into(),
        });
    }
    Ok(())
}

pub(crate) fn transpose12_data(src: &[f64], d: [usize; 4]) -> Vec<f64> {
    let [a, b, c, e] = d;
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * e;
                let t = ((i * c + k) * b + j) * e;
                out[t..t + e].copy_from_slice(&src[s..s + e]);
            }
        }
    }
    out
}

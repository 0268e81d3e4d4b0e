//! Vector-Jacobian products for every recorded operation.

use super::ops::{axis_split, gemm, sigmoid, transpose12_data, zoh_phi, zoh_phi_prime};
use super::{Op, Tape, Var};
use crate::error::Result;

type Grads = Vec<Option<Vec<f64>>>;

struct Acc<'a> {
    tape: &'a Tape,
    grads: &'a mut Grads,
}

impl Acc<'_> {
    /// Gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = self.tape.node(v.0);
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn add_map(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if let Some(dst) = self.slot(v) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }
}

pub(super) fn propagate(tape: &Tape, idx: usize, g: &[f64], grads: &mut Grads) -> Result<()> {
    let node = tape.node(idx);
    let out = node.value.data();
    let val = |v: Var| tape.value(v).data();
    let mut acc = Acc { tape, grads };

    match &node.op {
        Op::Leaf | Op::Constant | Op::Detach => {}
        Op::Add(a, b) => {
            acc.add_map(*a, |i| g[i]);
            acc.add_map(*b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc.add_map(*a, |i| g[i]);
            acc.add_map(*b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc.add_map(*a, |i| g[i] * bv[i]);
            acc.add_map(*b, |i| g[i] * av[i]);
        }
        Op::AddBias(x, b) => {
            acc.add_map(*x, |i| g[i]);
            if let Some(dst) = acc.slot(*b) {
                let n = dst.len();
                for (i, gi) in g.iter().enumerate() {
                    dst[i % n] += gi;
                }
            }
        }
        Op::Scale(x, c) => acc.add_map(*x, |i| g[i] * c),
        Op::AddScalar(x) => acc.add_map(*x, |i| g[i]),
        Op::Neg(x) => acc.add_map(*x, |i| -g[i]),
        Op::Exp(x) => acc.add_map(*x, |i| g[i] * out[i]),
        Op::Log(x) => {
            let xv = val(*x);
            acc.add_map(*x, |i| g[i] / xv[i]);
        }
        Op::Sigmoid(x) => acc.add_map(*x, |i| g[i] * out[i] * (1.0 - out[i])),
        Op::Softplus(x) => {
            let xv = val(*x);
            acc.add_map(*x, |i| g[i] * sigmoid(xv[i]));
        }
        Op::Silu(x) => {
            let xv = val(*x);
            acc.add_map(*x, |i| {
                let s = sigmoid(xv[i]);
                g[i] * s * (1.0 + xv[i] * (1.0 - s))
            });
        }
        Op::Abs(x) => {
            let xv = val(*x);
            acc.add_map(*x, |i| {
                if xv[i] > 0.0 {
                    g[i]
                } else if xv[i] < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            });
        }
        Op::Powf(x, c) => {
            let xv = val(*x);
            acc.add_map(*x, |i| g[i] * c * xv[i].powf(c - 1.0));
        }
        Op::Clamp(x, lo, hi) => {
            let xv = val(*x);
            acc.add_map(*x, |i| if xv[i] >= *lo && xv[i] <= *hi { g[i] } else { 0.0 });
        }
        Op::Matmul(a, b) => {
            let (da, db) = (tape.dims(*a), tape.dims(*b));
            let (m, k, n) = (da[0], da[1], db[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(dst) = acc.slot(*a) {
                gemm(m, n, k, g, false, bv, true, dst, 1.0);
            }
            if let Some(dst) = acc.slot(*b) {
                gemm(k, m, n, av, true, g, false, dst, 1.0);
            }
        }
        Op::Linear { x, w, b } => {
            let wd = tape.dims(*w);
            let (fan_in, fan_out) = (wd[0], wd[1]);
            let rows = g.len() / fan_out.max(1);
            let (xv, wv) = (val(*x), val(*w));
            if let Some(dst) = acc.slot(*x) {
                gemm(rows, fan_out, fan_in, g, false, wv, true, dst, 1.0);
            }
            if let Some(dst) = acc.slot(*w) {
                gemm(fan_in, rows, fan_out, xv, true, g, false, dst, 1.0);
            }
            if let Some(b) = b {
                if let Some(dst) = acc.slot(*b) {
                    for row in g.chunks(fan_out) {
                        for (d, gi) in dst.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let da = tape.dims(*a);
            let (batch, m, k) = (da[0], da[1], da[2]);
            let n = g.len() / (batch * m).max(1);
            let (av, bv) = (val(*a), val(*b));
            if let Some(dst) = acc.slot(*a) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    // dA = dC · Bᵀ, or dC · B when the forward used Bᵀ.
                    gemm(m, n, k, gi, false, bi, !trans_b, &mut dst[i * m * k..(i + 1) * m * k], 1.0);
                }
            }
            if let Some(dst) = acc.slot(*b) {
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let di = &mut dst[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // B stored [n, k]: dB = dCᵀ · A.
                        gemm(n, m, k, gi, true, ai, false, di, 1.0);
                    } else {
                        gemm(k, m, n, ai, true, gi, false, di, 1.0);
                    }
                }
            }
        }
        Op::Reshape(x) => acc.add_map(*x, |i| g[i]),
        Op::Transpose12(x) => {
            let d = tape.dims(idx_var(idx));
            let back = transpose12_data(g, [d[0], d[1], d[2], d[3]]);
            acc.add_map(*x, |i| back[i]);
        }
        Op::Softmax(x) => {
            let n = node.value.shape().last();
            if let Some(dst) = acc.slot(*x) {
                for ((y, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(dst.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let n = node.value.shape().last();
            if let Some(dst) = acc.slot(*x) {
                for ((y, gr), d) in out.chunks(n).zip(g.chunks(n)).zip(dst.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
        }
        Op::GatherRows { x, index } => {
            if let Some(dst) = acc.slot(*x) {
                let width = g.len().checked_div(index.len()).unwrap_or(0);
                for (r, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..width {
                            dst[i * width + j] += g[r * width + j];
                        }
                    }
                }
            }
        }
        Op::ScatterAddRows { x, index } => {
            if let Some(dst) = acc.slot(*x) {
                let width = dst.len().checked_div(index.len()).unwrap_or(0);
                for (r, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        for j in 0..width {
                            dst[r * width + j] += g[i * width + j];
                        }
                    }
                }
            }
        }
        Op::Sum(x) => acc.add_map(*x, |_| g[0]),
        Op::Mean(x) => {
            let n = tape.value(*x).numel() as f64;
            acc.add_map(*x, |_| g[0] / n);
        }
        Op::Concat { inputs, axis } => {
            let out_dims = node.value.dims();
            let (outer, total, inner) = axis_split(out_dims, *axis);
            let mut offset = 0;
            for &v in inputs {
                let size = tape.dims(v)[*axis];
                if let Some(dst) = acc.slot(v) {
                    for o in 0..outer {
                        let src = o * total * inner + offset * inner;
                        for j in 0..size * inner {
                            dst[o * size * inner + j] += g[src + j];
                        }
                    }
                }
                offset += size;
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_dims = tape.dims(*x).to_vec();
            let len = node.value.dims()[*axis];
            let (outer, size, inner) = axis_split(&in_dims, *axis);
            if let Some(dst) = acc.slot(*x) {
                for o in 0..outer {
                    let base = o * size * inner + start * inner;
                    for j in 0..len * inner {
                        dst[base + j] += g[o * len * inner + j];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = node.value.shape().last();
            let gv = val(*gain);
            if let Some(dst) = acc.slot(*gain) {
                for (gr, h) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        dst[j] += gr[j] * h[j];
                    }
                }
            }
            if let Some(dst) = acc.slot(*bias) {
                for gr in g.chunks(n) {
                    for j in 0..n {
                        dst[j] += gr[j];
                    }
                }
            }
            if let Some(dst) = acc.slot(*x) {
                for (r, ((gr, h), d)) in g.chunks(n).zip(xhat.chunks(n)).zip(dst.chunks_mut(n)).enumerate() {
                    let dh: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dhh = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dhh);
                    }
                }
            }
        }
        Op::RowNorm(x) => {
            let xv = val(*x);
            let n = tape.value(*x).shape().last();
            if let Some(dst) = acc.slot(*x) {
                for (r, norm) in out.iter().enumerate() {
                    // Subgradient 0 at the origin.
                    if *norm > 0.0 {
                        for j in 0..n {
                            dst[r * n + j] += g[r] * xv[r * n + j] / norm;
                        }
                    }
                }
            }
        }
        Op::DistanceBias {
            scores,
            gamma,
            dist,
            sign,
        } => {
            acc.add_map(*scores, |i| g[i]);
            let sd = node.value.dims();
            let (groups, heads, len) = (sd[0], sd[1], sd[2]);
            let d = dist.data();
            if let Some(dst) = acc.slot(*gamma) {
                for gi in 0..groups {
                    for m in 0..heads {
                        for i in 0..len {
                            let row = ((gi * heads + m) * len + i) * len;
                            let drow = (gi * len + i) * len;
                            let s: f64 = (0..len).map(|j| g[row + j] * d[drow + j]).sum();
                            dst[(gi * len + i) * heads + m] += sign * s;
                        }
                    }
                }
            }
        }
        Op::CausalConv { x, w, b } => {
            let xd = tape.dims(*x);
            let (groups, len, ch) = (xd[0], xd[1], xd[2]);
            let width = tape.dims(*w)[1];
            let (xv, wv) = (val(*x), val(*w));
            if let Some(dst) = acc.slot(*b) {
                for row in g.chunks(ch) {
                    for c in 0..ch {
                        dst[c] += row[c];
                    }
                }
            }
            let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
                for gi in 0..groups {
                    for t in 0..len {
                        for k in 0..width {
                            if let Some(src_t) = (t + k + 1).checked_sub(width) {
                                f(gi, t, k, src_t);
                            }
                        }
                    }
                }
            };
            if let Some(dst) = acc.slot(*w) {
                taps(&mut |gi, t, k, src_t| {
                    for c in 0..ch {
                        dst[c * width + k] += g[(gi * len + t) * ch + c] * xv[(gi * len + src_t) * ch + c];
                    }
                });
            }
            if let Some(dst) = acc.slot(*x) {
                taps(&mut |gi, t, k, src_t| {
                    for c in 0..ch {
                        dst[(gi * len + src_t) * ch + c] += g[(gi * len + t) * ch + c] * wv[c * width + k];
                    }
                });
            }
        }
        Op::ZohA { a, delta } => {
            let ad = tape.dims(*a);
            let (ch, state) = (ad[0], ad[1]);
            let tokens = g.len() / (ch * state).max(1);
            let (av, dv) = (val(*a), val(*delta));
            if let Some(dst) = acc.slot(*a) {
                for tok in 0..tokens {
                    for c in 0..ch {
                        let base = (tok * ch + c) * state;
                        for s in 0..state {
                            dst[c * state + s] += g[base + s] * out[base + s] * dv[tok * ch + c];
                        }
                    }
                }
            }
            if let Some(dst) = acc.slot(*delta) {
                for tok in 0..tokens {
                    for c in 0..ch {
                        let base = (tok * ch + c) * state;
                        let s: f64 = (0..state)
                            .map(|s| g[base + s] * out[base + s] * av[c * state + s])
                            .sum();
                        dst[tok * ch + c] += s;
                    }
                }
            }
        }
        Op::ZohB { a, b, delta } => {
            let ad = tape.dims(*a);
            let (ch, state) = (ad[0], ad[1]);
            let tokens = g.len() / (ch * state).max(1);
            let (av, bv, dv) = (val(*a), val(*b), val(*delta));
            let mut da = acc.slot(*a).map(|_| vec![0.0; ch * state]);
            let mut db = acc.slot(*b).map(|_| vec![0.0; tokens * state]);
            let mut dd = acc.slot(*delta).map(|_| vec![0.0; tokens * ch]);
            for tok in 0..tokens {
                for c in 0..ch {
                    let step = dv[tok * ch + c];
                    let base = (tok * ch + c) * state;
                    for s in 0..state {
                        let gi = g[base + s];
                        let av_cs = av[c * state + s];
                        let z = step * av_cs;
                        let (phi, dphi) = (zoh_phi(z), zoh_phi_prime(z));
                        let bb = bv[tok * state + s];
                        if let Some(da) = da.as_mut() {
                            da[c * state + s] += gi * dphi * step * step * bb;
                        }
                        if let Some(db) = db.as_mut() {
                            db[tok * state + s] += gi * phi * step;
                        }
                        if let Some(dd) = dd.as_mut() {
                            dd[tok * ch + c] += gi * bb * (phi + z * dphi);
                        }
                    }
                }
            }
            for (v, buf) in [(*a, da), (*b, db), (*delta, dd)] {
                if let Some(buf) = buf {
                    acc.add_map(v, |i| buf[i]);
                }
            }
        }
        Op::Scan {
            x,
            abar,
            bbar,
            c,
            states,
        } => {
            let xd = tape.dims(*x);
            let (groups, len, ch) = (xd[0], xd[1], xd[2]);
            let state = tape.dims(*c)[2];
            let (xv, av, bv, cv) = (val(*x), val(*abar), val(*bbar), val(*c));
            let want = [*x, *abar, *bbar, *c].map(|v| tape.node(v.0).requires_grad);
            let mut dx = vec![0.0; xv.len()];
            let mut da = vec![0.0; av.len()];
            let mut dbb = vec![0.0; bv.len()];
            let mut dc = vec![0.0; cv.len()];
            let mut dh = vec![0.0; ch * state];
            for gi in 0..groups {
                dh.iter_mut().for_each(|v| *v = 0.0);
                for t in (0..len).rev() {
                    let tok = gi * len + t;
                    for ci in 0..ch {
                        let gy = g[tok * ch + ci];
                        let base = (tok * ch + ci) * state;
                        let xin = xv[tok * ch + ci];
                        let mut gx = 0.0;
                        for s in 0..state {
                            let h = states[base + s];
                            dc[tok * state + s] += gy * h;
                            // dh carries ā_{t+1} ⊙ dh_{t+1} from the later step.
                            let total = dh[ci * state + s] + gy * cv[tok * state + s];
                            let prev = if t == 0 { 0.0 } else { states[base - ch * state + s] };
                            da[base + s] = total * prev;
                            dbb[base + s] = total * xin;
                            gx += total * bv[base + s];
                            dh[ci * state + s] = total * av[base + s];
                        }
                        dx[tok * ch + ci] = gx;
                    }
                }
            }
            for (v, buf, w) in [(*x, dx, want[0]), (*abar, da, want[1]), (*bbar, dbb, want[2]), (*c, dc, want[3])] {
                if w {
                    acc.add_map(v, |i| buf[i]);
                }
            }
        }
    }
    Ok(())
}

fn idx_var(idx: usize) -> Var {
    Var(idx)
}

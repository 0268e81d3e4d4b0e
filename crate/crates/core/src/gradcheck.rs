//! Central finite-difference gradient checking.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::distill::{kd_logits, span_kl, DistillConfig};
use crate::error::{Error, Result};
use crate::group::{GroupConfig, GroupLayout};
use crate::params::{Binding, ParamStore};
use crate::seg::{focal_loss, FocalConfig};
use crate::student::{StudentConfig, StudentEncoder};
use crate::teacher::{BiasSign, TeacherConfig, TeacherEncoder};
use crate::tensor::Tensor;
use crate::voxel::VoxelCoord;

/// Denominator floor for the relative error, so near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape gradient of `f` against central differences with step `h`,
/// for every entry of every input. `f` must return a scalar.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Reduces a tensor output to a scalar through fixed pseudo-random weights so every
/// output entry contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).numel();
    let dims = tape.dims(y).to_vec();
    let w = Tensor::from_fn(&dims, |i| {
        let t = (i as f64 + 1.0) * 0.618_033_988_749_895;
        (t - t.floor()) * 2.0 - 1.0
    })?;
    debug_assert_eq!(w.numel(), n);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Finite-difference step used by [`suite`].
pub const SUITE_STEP: f64 = 1e-5;

/// Worst result of one operation over several random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

type Builder = fn(&mut ChaCha8Rng, usize) -> Result<GradCheck>;

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<GradCheck> {
    let _ = rng;
    check(&[x], SUITE_STEP, |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y)
    })
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Rc<[bool]> {
    let mut m = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let keep = rng.random_range(0..cols);
        for c in 0..cols {
            m.push(c == keep || rng.random_bool(0.6));
        }
    }
    m.into()
}

fn random_coords(rng: &mut ChaCha8Rng, n: usize, span: i32) -> Vec<VoxelCoord> {
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < n {
        seen.insert((rng.random_range(0..span), rng.random_range(0..span), rng.random_range(0..2)));
    }
    seen.into_iter().map(|(x, y, z)| VoxelCoord::new(x, y, z)).collect()
}

/// Grouped input `[G, L, D]` for a random layout, with padded slots zero.
fn grouped_input(rng: &mut ChaCha8Rng, width: usize) -> Result<(GroupLayout, Tensor)> {
    let n = dim(rng, 3, 9);
    let coords = random_coords(rng, n, 6);
    let layout = GroupLayout::build(&coords, GroupConfig { window: 4, max_len: 4 })?;
    let mut x = uniform(rng, &[layout.groups(), layout.len(), width], -1.0, 1.0)?;
    for (slot, &m) in layout.mask().iter().enumerate() {
        if !m {
            x.data_mut()[slot * width..(slot + 1) * width].fill(0.0);
        }
    }
    Ok((layout, x))
}

/// Checks `x` and every parameter of a freshly initialized block.
fn block_check(
    store: &ParamStore,
    x: Tensor,
    forward: impl Fn(&mut Tape, &Binding, Var) -> Result<Var>,
) -> Result<GradCheck> {
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
    check(&inputs, SUITE_STEP, |t, v| {
        let params = Binding::from_vars(v[1..].to_vec());
        let y = forward(t, &params, v[0])?;
        weighted_sum(t, y)
    })
}

fn case_binary(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let dims = [dim(rng, 1, 4), dim(rng, 1, 5)];
    let (a, b) = (uniform(rng, &dims, -2.0, 2.0)?, uniform(rng, &dims, -2.0, 2.0)?);
    check(&[a, b], SUITE_STEP, |t, v| {
        let y = match i % 3 {
            0 => t.add(v[0], v[1])?,
            1 => t.sub(v[0], v[1])?,
            _ => t.mul(v[0], v[1])?,
        };
        weighted_sum(t, y)
    })
}

fn case_add_bias(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let n = dim(rng, 1, 5);
    let shape = [2, dim(rng, 1, 3), n];
    let x = uniform(rng, &shape, -2.0, 2.0)?;
    let b = uniform(rng, &[n], -2.0, 2.0)?;
    check(&[x, b], SUITE_STEP, |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        weighted_sum(t, y)
    })
}

fn case_affine(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, -2.0, 2.0)?;
    let (c, k) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    check(&[x], SUITE_STEP, |t, v| {
        let y = t.scale(v[0], c)?;
        let y = t.add_scalar(y, k)?;
        let y = t.neg(y)?;
        weighted_sum(t, y)
    })
}

fn case_exp(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, -2.0, 2.0)?;
    unary(rng, x, |t, v| t.exp(v))
}

fn case_log(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, 0.2, 3.0)?;
    unary(rng, x, |t, v| t.log(v))
}

fn case_sigmoid(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, -4.0, 4.0)?;
    unary(rng, x, |t, v| t.sigmoid(v))
}

fn case_softplus(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, -4.0, 4.0)?;
    unary(rng, x, |t, v| t.softplus(v))
}

fn case_silu(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, -4.0, 4.0)?;
    unary(rng, x, |t, v| t.silu(v))
}

fn case_abs(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = away_from_zero(rng, &shape, 0.1, 2.0)?;
    unary(rng, x, |t, v| t.abs(v))
}

fn case_powf(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, 0.2, 2.0)?;
    let c = rng.random_range(1.0..3.0);
    check(&[x], SUITE_STEP, |t, v| {
        let y = t.powf(v[0], c)?;
        weighted_sum(t, y)
    })
}

fn case_clamp(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let mut x = uniform(rng, &shape, -1.0, 1.0)?;
    for v in x.data_mut() {
        if (v.abs() - 0.5).abs() < 0.01 {
            *v *= 1.1;
        }
    }
    unary(rng, x, |t, v| t.clamp(v, -0.5, 0.5))
}

fn case_matmul(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let (a, b) = (uniform(rng, &[m, k], -1.0, 1.0)?, uniform(rng, &[k, n], -1.0, 1.0)?);
    check(&[a, b], SUITE_STEP, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y)
    })
}

fn case_linear(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let (din, dout) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let shape = [2, dim(rng, 1, 3), din];
    let x = uniform(rng, &shape, -1.0, 1.0)?;
    let w = uniform(rng, &[din, dout], -1.0, 1.0)?;
    let b = uniform(rng, &[dout], -1.0, 1.0)?;
    let with_bias = i.is_multiple_of(2);
    check(&[x, w, b], SUITE_STEP, |t, v| {
        let y = t.linear(v[0], v[1], with_bias.then_some(v[2]))?;
        weighted_sum(t, y)
    })
}

fn case_bmm(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let (bt, m, k, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let trans_b = i % 2 == 1;
    let a = uniform(rng, &[bt, m, k], -1.0, 1.0)?;
    let b = if trans_b {
        uniform(rng, &[bt, n, k], -1.0, 1.0)?
    } else {
        uniform(rng, &[bt, k, n], -1.0, 1.0)?
    };
    check(&[a, b], SUITE_STEP, |t, v| {
        let y = t.bmm(v[0], v[1], trans_b)?;
        weighted_sum(t, y)
    })
}

fn case_reshape_transpose(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let d = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let x = uniform(rng, &d, -1.0, 1.0)?;
    check(&[x], SUITE_STEP, |t, v| {
        let y = t.transpose12(v[0])?;
        let y = t.reshape(y, &[d[0] * d[2], d[1] * d[3]])?;
        let y = t.mul(y, y)?;
        weighted_sum(t, y)
    })
}

fn case_softmax(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 5));
    let x = uniform(rng, &[2, r, c], -2.0, 2.0)?;
    let mask = (i.is_multiple_of(2)).then(|| random_mask(rng, 2 * r, c));
    check(&[x], SUITE_STEP, |t, v| {
        let y = t.softmax(v[0], mask.clone())?;
        weighted_sum(t, y)
    })
}

fn case_log_softmax(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
    let x = uniform(rng, &shape, -2.0, 2.0)?;
    unary(rng, x, |t, v| t.log_softmax(v))
}

fn case_gather_scatter(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let (rows, width, n) = (dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 6));
    let index: Vec<Option<usize>> = (0..n)
        .map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..rows)))
        .collect();
    let scatter = i % 2 == 1;
    let x = uniform(rng, &[if scatter { n } else { rows }, width], -1.0, 1.0)?;
    check(&[x], SUITE_STEP, |t, v| {
        let y = if scatter {
            t.scatter_add_rows(v[0], &index, rows)?
        } else {
            t.gather_rows(v[0], &index)?
        };
        let y = t.mul(y, y)?;
        weighted_sum(t, y)
    })
}

fn case_reductions(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = uniform(rng, &shape, -1.0, 1.0)?;
    check(&[x], SUITE_STEP, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        if i.is_multiple_of(2) {
            t.sum(sq)
        } else {
            t.mean(sq)
        }
    })
}

fn case_concat_narrow(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let axis = i % 3;
    let mut base = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
    let parts: Vec<Tensor> = (0..3)
        .map(|_| {
            base[axis] = dim(rng, 1, 3);
            uniform(rng, &base, -1.0, 1.0)
        })
        .collect::<Result<_>>()?;
    let total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
    let start = rng.random_range(0..total);
    let len = rng.random_range(1..=total - start);
    check(&parts, SUITE_STEP, |t, v| {
        let y = t.concat(v, axis)?;
        let y = t.mul(y, y)?;
        let y = t.narrow(y, axis, start, len)?;
        weighted_sum(t, y)
    })
}

fn case_layer_norm(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let n = dim(rng, 2, 6);
    let shape = [dim(rng, 1, 4), n];
    let x = uniform(rng, &shape, -2.0, 2.0)?;
    let gain = uniform(rng, &[n], 0.5, 1.5)?;
    let bias = uniform(rng, &[n], -0.5, 0.5)?;
    check(&[x, gain, bias], SUITE_STEP, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y)
    })
}

fn case_row_norm(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
    let x = away_from_zero(rng, &shape, 0.2, 2.0)?;
    unary(rng, x, |t, v| t.row_norm(v))
}

fn case_distance_bias(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let (g, m, l) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4));
    let scores = uniform(rng, &[g, m, l, l], -1.0, 1.0)?;
    let gamma = uniform(rng, &[g, l, m], 0.0, 2.0)?;
    let dist = Rc::new(uniform(rng, &[g, l, l], 0.0, 3.0)?);
    let sign = if i.is_multiple_of(2) { -1.0 } else { 1.0 };
    check(&[scores, gamma], SUITE_STEP, |t, v| {
        let y = t.distance_bias(v[0], v[1], dist.clone(), sign)?;
        weighted_sum(t, y)
    })
}

fn case_causal_conv(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let (g, l, c, k) = (dim(rng, 1, 2), dim(rng, 1, 5), dim(rng, 1, 3), dim(rng, 1, 4));
    let x = uniform(rng, &[g, l, c], -1.0, 1.0)?;
    let w = uniform(rng, &[c, k], -1.0, 1.0)?;
    let b = uniform(rng, &[c], -1.0, 1.0)?;
    check(&[x, w, b], SUITE_STEP, |t, v| {
        let y = t.causal_conv(v[0], v[1], v[2])?;
        weighted_sum(t, y)
    })
}

fn zoh_inputs(rng: &mut ChaCha8Rng) -> Result<[Tensor; 3]> {
    let (g, l, c, s) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    Ok([
        uniform(rng, &[c, s], -3.0, -0.1)?,
        uniform(rng, &[g, l, s], -1.0, 1.0)?,
        uniform(rng, &[g, l, c], 0.05, 1.0)?,
    ])
}

fn case_zoh_a(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let [a, _, delta] = zoh_inputs(rng)?;
    check(&[a, delta], SUITE_STEP, |t, v| {
        let y = t.zoh_a(v[0], v[1])?;
        weighted_sum(t, y)
    })
}

fn case_zoh_b(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let [a, b, delta] = zoh_inputs(rng)?;
    check(&[a, b, delta], SUITE_STEP, |t, v| {
        let y = t.zoh_b(v[0], v[1], v[2])?;
        weighted_sum(t, y)
    })
}

fn case_scan(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let (g, l, c, s) = (dim(rng, 1, 2), dim(rng, 1, 5), dim(rng, 1, 3), dim(rng, 1, 3));
    let x = uniform(rng, &[g, l, c], -1.0, 1.0)?;
    let abar = uniform(rng, &[g, l, c, s], 0.1, 0.99)?;
    let bbar = uniform(rng, &[g, l, c, s], -1.0, 1.0)?;
    let cm = uniform(rng, &[g, l, s], -1.0, 1.0)?;
    check(&[x, abar, bbar, cm], SUITE_STEP, |t, v| {
        let y = t.selective_scan(v[0], v[1], v[2], v[3])?;
        weighted_sum(t, y)
    })
}

fn case_focal(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let n = dim(rng, 1, 6);
    let p = uniform(rng, &[n, 1], 0.05, 0.95)?;
    let targets: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let cfg = FocalConfig {
        alpha: rng.random_range(0.1..0.9),
        gamma: rng.random_range(1.0..3.0),
    };
    check(&[p], SUITE_STEP, |t, v| {
        let y = focal_loss(t, v[0], &targets, cfg)?;
        weighted_sum(t, y)
    })
}

fn case_span_kl(rng: &mut ChaCha8Rng, _: usize) -> Result<GradCheck> {
    let dims = [dim(rng, 1, 4), dim(rng, 2, 4)];
    let s = uniform(rng, &dims, -2.0, 2.0)?;
    let tc = uniform(rng, &dims, -2.0, 2.0)?;
    let temp = rng.random_range(0.5..3.0);
    check(&[s], SUITE_STEP, |t, v| {
        let tc = t.constant(tc.clone());
        span_kl(t, v[0], tc, temp)
    })
}

fn case_kd_logits(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let dims = [dim(rng, 1, 4), dim(rng, 1, 3)];
    let st = uniform(rng, &dims, 0.05, 0.95)?;
    let mut tc = uniform(rng, &dims, 0.0, 1.0)?;
    tc.data_mut()[0] = 0.9;
    let cfg = DistillConfig {
        literal_logits: i % 2 == 1,
        alpha_t: rng.random_range(0.5..2.0),
        ..DistillConfig::default()
    };
    check(&[st], SUITE_STEP, |t, v| {
        let tc = t.constant(tc.clone());
        kd_logits(t, tc, v[0], &cfg)
    })
}

fn case_teacher_block(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let cfg = TeacherConfig {
        width: 8,
        heads: 2,
        depth: 1,
        ffn_mult: 2,
        distance_bias_sign: if i.is_multiple_of(2) { BiasSign::Subtract } else { BiasSign::Add },
    };
    let mut store = ParamStore::new();
    let enc = TeacherEncoder::new(&mut store, "t", &cfg, rng)?;
    let (layout, x) = grouped_input(rng, cfg.width)?;
    block_check(&store, x, |t, p, x| enc.forward(t, p, x, &layout))
}

fn case_mamba_block(rng: &mut ChaCha8Rng, i: usize) -> Result<GradCheck> {
    let cfg = StudentConfig {
        width: 6,
        depth: 1,
        expand: 2,
        state: 3,
        d_conv: 3,
        dt_rank: Some(1 + i % 2),
    };
    let mut store = ParamStore::new();
    let enc = StudentEncoder::new(&mut store, "s", &cfg, rng)?;
    let (layout, x) = grouped_input(rng, cfg.width)?;
    block_check(&store, x, |t, p, x| enc.forward(t, p, x, &layout))
}

/// Every differentiable tape operation, three composite losses and both encoder blocks.
pub fn catalog() -> Vec<(&'static str, Builder)> {
    vec![
        ("add/sub/mul", case_binary as Builder),
        ("add_bias", case_add_bias),
        ("scale/add_scalar/neg", case_affine),
        ("exp", case_exp),
        ("log", case_log),
        ("sigmoid", case_sigmoid),
        ("softplus", case_softplus),
        ("silu", case_silu),
        ("abs", case_abs),
        ("powf", case_powf),
        ("clamp", case_clamp),
        ("matmul", case_matmul),
        ("linear", case_linear),
        ("bmm", case_bmm),
        ("reshape/transpose12", case_reshape_transpose),
        ("softmax", case_softmax),
        ("log_softmax", case_log_softmax),
        ("gather/scatter_add_rows", case_gather_scatter),
        ("sum/mean", case_reductions),
        ("concat/narrow", case_concat_narrow),
        ("layer_norm", case_layer_norm),
        ("row_norm", case_row_norm),
        ("distance_bias", case_distance_bias),
        ("causal_conv", case_causal_conv),
        ("zoh_a", case_zoh_a),
        ("zoh_b", case_zoh_b),
        ("selective_scan", case_scan),
        ("focal_loss", case_focal),
        ("span_kl", case_span_kl),
        ("kd_logits", case_kd_logits),
        ("teacher_block", case_teacher_block),
        ("mamba_block", case_mamba_block),
    ]
}

/// Runs `instances` random instances of the named case.
pub fn run_case(name: &str, instances: usize, seed: u64) -> Result<CaseResult> {
    let (name, build) = catalog()
        .into_iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Contract(format!("unknown gradient case {name}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CaseResult {
        name,
        instances,
        checked: 0,
        max_rel_error: 0.0,
    };
    for i in 0..instances {
        let r = build(&mut rng, i)?;
        out.checked += r.checked;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
    }
    Ok(out)
}

pub fn suite(instances: usize, seed: u64) -> Result<Vec<CaseResult>> {
    catalog()
        .iter()
        .map(|(name, _)| run_case(name, instances, seed))
        .collect()
}

//! Selective state-space encoder layer (the student).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{zoh_phi, Tape, Var};
use crate::error::{Error, Result};
use crate::group::GroupLayout;
use crate::nn::{row_mask, uniform_weights, LayerNorm, Linear};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentSize {
    Small,
    Medium,
    Large,
}

impl StudentSize {
    /// `(d_conv, expand)`.
    pub fn shape(self) -> (usize, usize) {
        match self {
            StudentSize::Small => (3, 1),
            StudentSize::Medium => (4, 2),
            StudentSize::Large => (5, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub width: usize,
    pub depth: usize,
    pub expand: usize,
    pub state: usize,
    pub d_conv: usize,
    /// Defaults to `⌈width / 16⌉`.
    pub dt_rank: Option<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self::sized(64, StudentSize::Medium)
    }
}

impl StudentConfig {
    pub fn sized(width: usize, size: StudentSize) -> Self {
        let (d_conv, expand) = size.shape();
        Self {
            width,
            depth: 1,
            expand,
            state: 16,
            d_conv,
            dt_rank: None,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.width
    }

    pub fn rank(&self) -> usize {
        self.dt_rank.unwrap_or(self.width.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if [self.width, self.expand, self.state, self.d_conv, self.rank()].contains(&0) {
            return Err(Error::Config("student dimensions must all be positive".into()));
        }
        Ok(())
    }
}

/// Scalar ZOH: `(exp(Δa), (exp(Δa) − 1)·Δ·b / (Δa))`.
pub fn zoh_scalar(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Domain {
            op: "zoh_discretize",
            reason: format!("step size must be positive, got {delta}"),
        });
    }
    let z = delta * a;
    Ok((z.exp(), zoh_phi(z) * delta * b))
}

/// Tape ZOH for diagonal `a: [C, S]`, input maps `b: [G, L, S]` and steps `delta: [G, L, C]`;
/// both outputs are `[G, L, C, S]`.
pub fn zoh_discretize(tape: &mut Tape, a: Var, b: Var, delta: Var) -> Result<(Var, Var)> {
    let abar = tape.zoh_a(a, delta)?;
    let bbar = tape.zoh_b(a, b, delta)?;
    Ok((abar, bbar))
}

pub fn selective_scan(tape: &mut Tape, x: Var, abar: Var, bbar: Var, c: Var) -> Result<Var> {
    tape.set_scope(Some("ssm.scan"));
    let y = tape.selective_scan(x, abar, bbar, c);
    tape.set_scope(None);
    y
}

#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub inner: usize,
    pub state: usize,
    pub rank: usize,
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub out_proj: Linear,
}

impl MambaLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StudentConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, inner, state, rank) = (cfg.width, cfg.inner(), cfg.state, cfg.rank());
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d, 2 * inner, rng)?;
        let conv_w = store.add(format!("{name}.conv.weight"), uniform_weights(rng, inner, cfg.d_conv)?)?;
        let conv_b = store.add(format!("{name}.conv.bias"), Tensor::zeros(&[inner])?)?;
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), inner, rank + 2 * state, rng)?;
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), rank, inner, rng)?;
        // Step sizes start log-uniform in [1e-3, 1e-1] through the inverse softplus.
        let dt_bias = Tensor::from_fn(&[inner], |_| {
            let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        })?;
        *store.get_mut(dt_proj.bias) = dt_bias;
        let a_log = Tensor::from_fn(&[inner, state], |i| ((i % state) as f64 + 1.0).ln())?;
        let a_log = store.add(format!("{name}.a_log"), a_log)?;
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), inner, d, rng)?;
        Ok(Self {
            inner,
            state,
            rank,
            norm,
            in_proj,
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            out_proj,
        })
    }

    /// Residual block on `x: [G, L, D]`; `keep` is the `[G, L, D]` slot mask.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, keep: Var) -> Result<Var> {
        let (inner, state, rank) = (self.inner, self.state, self.rank);
        let h = self.norm.forward(tape, params, x)?;
        let h = tape.mul(h, keep)?;

        tape.set_scope(Some("ssm.in_proj"));
        let u = self.in_proj.forward(tape, params, h)?;
        tape.set_scope(None);
        let stream = tape.narrow(u, 2, 0, inner)?;
        let gate = tape.narrow(u, 2, inner, inner)?;

        tape.set_scope(Some("ssm.conv"));
        let s = tape.causal_conv(stream, params.var(self.conv_w), params.var(self.conv_b))?;
        tape.set_scope(None);
        let s = tape.silu(s)?;

        tape.set_scope(Some("ssm.x_proj"));
        let proj = self.x_proj.forward(tape, params, s)?;
        tape.set_scope(None);
        let dt_in = tape.narrow(proj, 2, 0, rank)?;
        let b = tape.narrow(proj, 2, rank, state)?;
        let c = tape.narrow(proj, 2, rank + state, state)?;

        tape.set_scope(Some("ssm.dt_proj"));
        let delta = self.dt_proj.forward(tape, params, dt_in)?;
        tape.set_scope(None);
        let delta = tape.softplus(delta)?;

        let a = tape.exp(params.var(self.a_log))?;
        let a = tape.neg(a)?;
        let (abar, bbar) = zoh_discretize(tape, a, b, delta)?;
        let y = selective_scan(tape, s, abar, bbar, c)?;

        let g = tape.silu(gate)?;
        let y = tape.mul(y, g)?;
        tape.set_scope(Some("ssm.out_proj"));
        let o = self.out_proj.forward(tape, params, y)?;
        tape.set_scope(None);
        let o = tape.mul(o, keep)?;
        tape.add(x, o)
    }
}

#[derive(Clone, Debug)]
pub struct StudentEncoder {
    pub layers: Vec<MambaLayer>,
}

impl StudentEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &StudentConfig, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..cfg.depth)
            .map(|i| MambaLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, layout: &GroupLayout) -> Result<Var> {
        if layout.is_empty() {
            return Ok(x);
        }
        let width = tape.dims(x)[2];
        let keep = tape.constant(row_mask(layout.mask(), &[layout.groups(), layout.len(), width])?);
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, params, h, keep))
    }
}

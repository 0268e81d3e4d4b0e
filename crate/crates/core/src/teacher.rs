//! Distance-aware multi-head attention encoder layer (the teacher).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::group::GroupLayout;
use crate::nn::{row_mask, LayerNorm, Linear};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// Sign applied to `γ·d` before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasSign {
    /// Larger γ shrinks the receptive field.
    #[default]
    Subtract,
    /// The literal `+γ·d` variant.
    Add,
}

impl BiasSign {
    pub fn factor(self) -> f64 {
        match self {
            BiasSign::Subtract => -1.0,
            BiasSign::Add => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    pub distance_bias_sign: BiasSign,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 8,
            depth: 1,
            ffn_mult: 4,
            distance_bias_sign: BiasSign::Subtract,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "teacher width {} must be a positive multiple of the head count {}",
                self.width, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("teacher ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Coordinate MLP producing the positional embedding from in-window positions.
#[derive(Clone, Copy, Debug)]
pub struct PosEmbed {
    pub hidden: Linear,
    pub out: Linear,
}

impl PosEmbed {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), 3, width, rng)?,
            out: Linear::new(store, &format!("{name}.1"), width, width, rng)?,
        })
    }
}

/// `[G, L, D]` positional embedding for the slots of `layout`.
pub fn positional_embed(tape: &mut Tape, params: &Binding, pe: &PosEmbed, layout: &GroupLayout) -> Result<Var> {
    let coords = tape.constant(layout.local_coords());
    positional_embed_from(tape, params, pe, coords)
}

pub fn positional_embed_from(tape: &mut Tape, params: &Binding, pe: &PosEmbed, coords: Var) -> Result<Var> {
    tape.set_scope(Some("teacher.pe"));
    let h = pe.hidden.forward(tape, params, coords)?;
    let h = tape.silu(h)?;
    let out = pe.out.forward(tape, params, h);
    tape.set_scope(None);
    out
}

#[derive(Clone, Debug)]
pub struct TeacherLayer {
    pub heads: usize,
    pub sign: BiasSign,
    pub norm_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub gamma: Linear,
    pub out: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Per-head attention weights `[G, M, L, L]` and controllers `[G, L, M]` of one forward.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub weights: Tensor,
    pub gamma: Tensor,
}

/// Per-batch constants shared by every layer of an encoder stack.
#[derive(Clone, Debug)]
pub struct SequenceContext {
    pub groups: usize,
    pub len: usize,
    pub mask: Rc<[bool]>,
    pub dist: Rc<Tensor>,
}

impl SequenceContext {
    pub fn new(layout: &GroupLayout) -> Self {
        Self {
            groups: layout.groups(),
            len: layout.len(),
            mask: layout.mask().into(),
            dist: Rc::new(layout.distances()),
        }
    }

    /// `[G, L, width]` 0/1 tensor that zeroes padded slots.
    pub fn width_mask(&self, width: usize) -> Result<Tensor> {
        row_mask(&self.mask, &[self.groups, self.len, width])
    }
}

impl TeacherLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TeacherConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        Ok(Self {
            heads: cfg.heads,
            sign: cfg.distance_bias_sign,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d)?,
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            gamma: Linear::new(store, &format!("{name}.gamma"), d, cfg.heads, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, cfg.ffn_mult * d, rng)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), cfg.ffn_mult * d, d, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, pe: Var, ctx: &SequenceContext) -> Result<Var> {
        self.forward_traced(tape, params, x, pe, ctx).map(|(y, _)| y)
    }

    /// Pre-norm residual block: `x + attn(norm(x))`, then `x + ffn(norm(x))`, padded slots zeroed.
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &Binding,
        x: Var,
        pe: Var,
        ctx: &SequenceContext,
    ) -> Result<(Var, AttentionTrace)> {
        let width = tape.dims(x)[2];
        let keep = tape.constant(ctx.width_mask(width)?);

        let f = self.norm_attn.forward(tape, params, x)?;
        let (q, k, v) = qkv_project(tape, params, self, f, pe)?;
        let gamma = gamma_heads(tape, params, self, q)?;
        let (attended, weights) = ada_attention(tape, q, k, v, gamma, ctx, self.heads, self.sign)?;
        tape.set_scope(Some("attn.out"));
        let projected = self.out.forward(tape, params, attended)?;
        tape.set_scope(None);
        let projected = tape.mul(projected, keep)?;
        let x = tape.add(x, projected)?;

        let h = self.norm_ffn.forward(tape, params, x)?;
        tape.set_scope(Some("teacher.ffn"));
        let h = self.ffn_in.forward(tape, params, h)?;
        let h = tape.silu(h)?;
        let h = self.ffn_out.forward(tape, params, h)?;
        tape.set_scope(None);
        let h = tape.mul(h, keep)?;
        let y = tape.add(x, h)?;

        let trace = AttentionTrace {
            weights: tape.value(weights).clone(),
            gamma: tape.value(gamma).clone(),
        };
        Ok((y, trace))
    }
}

/// `Q = W_q(F + PE)`, `K = W_k(F + PE)`, `V = W_v(F)`, each `[G, L, D]`.
pub fn qkv_project(tape: &mut Tape, params: &Binding, layer: &TeacherLayer, f: Var, pe: Var) -> Result<(Var, Var, Var)> {
    let fp = tape.add(f, pe)?;
    tape.set_scope(Some("attn.qkv"));
    let q = layer.q.forward(tape, params, fp)?;
    let k = layer.k.forward(tape, params, fp)?;
    let v = layer.v.forward(tape, params, f)?;
    tape.set_scope(None);
    Ok((q, k, v))
}

/// Non-negative per-head controllers `softplus(W_γ Q)`, `[G, L, M]`.
pub fn gamma_heads(tape: &mut Tape, params: &Binding, layer: &TeacherLayer, q: Var) -> Result<Var> {
    tape.set_scope(Some("teacher.gamma"));
    let g = layer.gamma.forward(tape, params, q)?;
    tape.set_scope(None);
    tape.softplus(g)
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let d = tape.dims(x).to_vec();
    let (g, l, dh) = (d[0], d[1], d[2] / heads);
    let x = tape.reshape(x, &[g, l, heads, dh])?;
    let x = tape.transpose12(x)?;
    tape.reshape(x, &[g * heads, l, dh])
}

/// Key mask replicated to `[G, M, L, L]`.
pub fn key_mask(ctx: &SequenceContext, heads: usize) -> Rc<[bool]> {
    let l = ctx.len;
    let mut out = Vec::with_capacity(ctx.groups * heads * l * l);
    for g in 0..ctx.groups {
        let keys = &ctx.mask[g * l..(g + 1) * l];
        for _ in 0..heads * l {
            out.extend_from_slice(keys);
        }
    }
    out.into()
}

/// Distance-biased attention over unmasked keys. Returns the concatenated head
/// outputs `[G, L, D]` (before the output projection) and the weights `[G, M, L, L]`.
#[allow(clippy::too_many_arguments)]
pub fn ada_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    gamma: Var,
    ctx: &SequenceContext,
    heads: usize,
    sign: BiasSign,
) -> Result<(Var, Var)> {
    let d = tape.dims(q).to_vec();
    let (g, l, width) = (d[0], d[1], d[2]);
    if width % heads != 0 {
        return Err(Error::Dimension {
            op: "ada_attention",
            lhs: d,
            rhs: vec![heads],
        });
    }
    let dh = width / heads;
    let (qh, kh, vh) = (split_heads(tape, q, heads)?, split_heads(tape, k, heads)?, split_heads(tape, v, heads)?);
    tape.set_scope(Some("attn.scores"));
    let scores = tape.bmm(qh, kh, true)?;
    tape.set_scope(None);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let scores = tape.reshape(scores, &[g, heads, l, l])?;
    let biased = tape.distance_bias(scores, gamma, ctx.dist.clone(), sign.factor())?;
    let weights = tape.softmax(biased, Some(key_mask(ctx, heads)))?;
    let w = tape.reshape(weights, &[g * heads, l, l])?;
    tape.set_scope(Some("attn.context"));
    let out = tape.bmm(w, vh, false)?;
    tape.set_scope(None);
    let out = tape.reshape(out, &[g, heads, l, dh])?;
    let out = tape.transpose12(out)?;
    let out = tape.reshape(out, &[g, l, width])?;
    Ok((out, weights))
}

/// Positional embedding plus a stack of layers sharing it.
#[derive(Clone, Debug)]
pub struct TeacherEncoder {
    pub pe: PosEmbed,
    pub layers: Vec<TeacherLayer>,
}

impl TeacherEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &TeacherConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let pe = PosEmbed::new(store, &format!("{name}.pe"), cfg.width, rng)?;
        let layers = (0..cfg.depth)
            .map(|i| TeacherLayer::new(store, &format!("{name}.layer{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { pe, layers })
    }

    /// Runs every layer on grouped sequences `x: [G, L, D]`.
    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, layout: &GroupLayout) -> Result<Var> {
        if layout.is_empty() {
            return Ok(x);
        }
        let ctx = SequenceContext::new(layout);
        let pe = positional_embed(tape, params, &self.pe, layout)?;
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, params, h, pe, &ctx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupConfig;
    use crate::voxel::VoxelCoord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gamma_projection_gives_ln2() {
        let mut store = ParamStore::new();
        let cfg = TeacherConfig {
            width: 8,
            heads: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = TeacherLayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
        store.get_mut(layer.gamma.weight).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let q = tape.constant(Tensor::from_fn(&[1, 3, 8], |i| i as f64).unwrap());
        let g = gamma_heads(&mut tape, &p, &layer, q).unwrap();
        assert!(tape.value(g).data().iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn padded_slots_stay_zero() {
        let mut store = ParamStore::new();
        let cfg = TeacherConfig {
            width: 8,
            heads: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = TeacherEncoder::new(&mut store, "t", &cfg, &mut rng).unwrap();
        let coords = [VoxelCoord::new(0, 0, 0), VoxelCoord::new(1, 2, 0), VoxelCoord::new(2, 1, 1)];
        let layout = GroupLayout::build(&coords, GroupConfig { window: 4, max_len: 5 }).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = Tensor::from_fn(&[1, 5, 8], |i| if i < 24 { (i as f64 * 0.37).sin() } else { 0.0 }).unwrap();
        let x = tape.constant(x);
        let y = enc.forward(&mut tape, &p, x, &layout).unwrap();
        assert!(tape.value(y).data()[24..].iter().all(|&v| v == 0.0));
    }
}

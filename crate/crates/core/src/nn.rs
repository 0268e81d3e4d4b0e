//! Parameterized building blocks shared by the encoders and heads.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Uniform(−1/√fan_in, 1/√fan_in) weights, the usual default for dense layers.
pub fn uniform_weights(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound))
}

/// Affine layer `y = x·W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_weights(rng, fan_in, fan_out)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])?)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Same as [`Linear::new`] with all-zero weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out])?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])?)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, params.var(self.weight), Some(params.var(self.bias)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[width], 1.0)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[width])?)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, params.var(self.gain), params.var(self.bias), Self::EPS)
    }
}

/// Two affine layers with a SiLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.0"), fan_in, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.1"), hidden, fan_out, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, params, x)?;
        let h = tape.silu(h)?;
        self.out.forward(tape, params, h)
    }
}

/// Builds a constant `[rows, width]` tensor whose row `r` is all `mask[r]` as 0/1.
pub fn row_mask(mask: &[bool], dims: &[usize]) -> Result<Tensor> {
    let width = dims.iter().product::<usize>() / mask.len().max(1);
    Tensor::from_fn(dims, |i| if mask[i / width.max(1)] { 1.0 } else { 0.0 })
}

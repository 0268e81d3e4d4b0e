//! Knowledge transfer between the attention teacher and the state-space student:
//! coordinate adapter, feature, span-head and gated logit losses, and the total objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::group::GroupLayout;
use crate::head::{head_forward, DetHead};
use crate::params::Binding;
use crate::tensor::Tensor;
use crate::voxel::{hash_coord, index_of, intersect_coord_lists, VoxelCoord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha_t: f64,
    /// Teacher confidence above which a logit entry is distilled.
    pub gate_threshold: f64,
    pub temperature: f64,
    /// Use `−α_t(k − p_st)·log p_st` over every entry instead of the gated mean.
    pub literal_logits: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            alpha_t: 1.0,
            gate_threshold: 0.3,
            temperature: 1.0,
            literal_logits: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha1, self.alpha2, self.lambda1, self.lambda2, self.lambda3, self.alpha_t];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("distillation weights must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::Config("gate threshold must lie in [0, 1]".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Label-only training: every KD weight zero.
    pub fn disabled() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn kd_enabled(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0 || self.lambda3 > 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub shallow: f64,
    pub deep: f64,
    pub feats: f64,
    pub span: f64,
    pub logits: f64,
    pub cls: f64,
    pub reg: f64,
    pub kd: f64,
    pub total: f64,
}

/// Raw loss terms before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub seg: f64,
    pub shallow: f64,
    pub deep: f64,
    pub span: f64,
    pub logits: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Row lookup of `v_com` in `coords`; absent coordinates map to `None`.
pub fn adapter_index(coords: &[VoxelCoord], v_com: &[VoxelCoord]) -> Result<Vec<Option<usize>>> {
    let idx = index_of(coords);
    v_com
        .iter()
        .map(|&c| Ok(idx.get(&hash_coord(c)?).copied()))
        .collect()
}

/// Feature rows in `v_com` order, zero rows where `coords` lacks the coordinate.
pub fn adapter_mask(tape: &mut Tape, feats: Var, coords: &[VoxelCoord], v_com: &[VoxelCoord]) -> Result<Var> {
    let index = adapter_index(coords, v_com)?;
    tape.gather_rows(feats, &index)
}

/// Value-level adapter.
pub fn adapter_mask_values(feats: &Tensor, coords: &[VoxelCoord], v_com: &[VoxelCoord]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let out = adapter_mask(&mut tape, f, coords, v_com)?;
    Ok(tape.value(out).clone())
}

/// Features of one model at both taps.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTaps<'a> {
    /// Grouped encoder output `[G, L, D]` before diffusion.
    pub shallow: Var,
    pub layout: &'a GroupLayout,
    /// Per-voxel encoder output `[N, D]` after diffusion.
    pub deep: Var,
    pub coords: &'a [VoxelCoord],
}

#[derive(Clone, Copy, Debug)]
pub struct FeatLosses {
    pub shallow: Var,
    pub deep: Var,
    pub feats: Var,
}

fn sum_row_norms(tape: &mut Tape, student: Var, teacher: Var) -> Result<Var> {
    if tape.dims(student)[0] == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let diff = tape.sub(student, teacher)?;
    let norms = tape.row_norm(diff)?;
    tape.sum(norms)
}

/// Shallow loss over real grouped slots, deep loss over the shared coordinates
/// of the post-diffusion sets. Teacher features are detached.
pub fn kd_feats(tape: &mut Tape, teacher: FeatureTaps<'_>, student: FeatureTaps<'_>, cfg: &DistillConfig) -> Result<FeatLosses> {
    if teacher.layout.mask() != student.layout.mask() || teacher.layout.slot_coords() != student.layout.slot_coords() {
        return Err(Error::Alignment("teacher and student groupings differ on the shallow path".into()));
    }
    let width = *tape.dims(student.shallow).last().expect("rank 3");
    let slots: Vec<Option<usize>> = student
        .layout
        .mask()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(s, _)| Some(s))
        .collect();
    let rows = student.layout.groups() * student.layout.len();
    let t_flat = tape.detach(teacher.shallow);
    let t_flat = tape.reshape(t_flat, &[rows, width])?;
    let s_flat = tape.reshape(student.shallow, &[rows, width])?;
    let t_rows = tape.gather_rows(t_flat, &slots)?;
    let s_rows = tape.gather_rows(s_flat, &slots)?;
    let shallow = sum_row_norms(tape, s_rows, t_rows)?;

    let v_com = intersect_coord_lists(teacher.coords, student.coords);
    let t_deep = tape.detach(teacher.deep);
    let t_psi = adapter_mask(tape, t_deep, teacher.coords, &v_com)?;
    let s_psi = adapter_mask(tape, student.deep, student.coords, &v_com)?;
    let deep = sum_row_norms(tape, s_psi, t_psi)?;

    let a = tape.scale(shallow, cfg.alpha1)?;
    let b = tape.scale(deep, cfg.alpha2)?;
    let feats = tape.add(a, b)?;
    Ok(FeatLosses { shallow, deep, feats })
}

/// Mean over rows of `KL(p_st ‖ p_tc)` where both distributions come from the
/// frozen teacher head (softmax over classes at temperature `T`), applied to
/// student and teacher features restricted to their shared coordinates.
#[allow(clippy::too_many_arguments)]
pub fn kd_span(
    tape: &mut Tape,
    student: Var,
    student_coords: &[VoxelCoord],
    teacher: Var,
    teacher_coords: &[VoxelCoord],
    head: &DetHead,
    head_params: &Binding,
    temperature: f64,
) -> Result<Var> {
    let v_com = intersect_coord_lists(teacher_coords, student_coords);
    if v_com.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let frozen = head_params.detached(tape);
    let s_rows = adapter_mask(tape, student, student_coords, &v_com)?;
    let teacher = tape.detach(teacher);
    let t_rows = adapter_mask(tape, teacher, teacher_coords, &v_com)?;
    let s_logits = head_forward(tape, &frozen, head, s_rows)?.cls_logits;
    let t_logits = head_forward(tape, &frozen, head, t_rows)?.cls_logits;
    span_kl(tape, s_logits, t_logits, temperature)
}

/// `mean_rows Σ_c p_s·(log p_s − log p_t)` for logits `[R, C]` at temperature `T`;
/// the teacher side is detached.
pub fn span_kl(tape: &mut Tape, student_logits: Var, teacher_logits: Var, temperature: f64) -> Result<Var> {
    let rows = tape.dims(student_logits)[0];
    let s = tape.scale(student_logits, 1.0 / temperature)?;
    let log_ps = tape.log_softmax(s)?;
    let t = tape.detach(teacher_logits);
    let t = tape.scale(t, 1.0 / temperature)?;
    let log_pt = tape.log_softmax(t)?;
    let ps = tape.exp(log_ps)?;
    let gap = tape.sub(log_ps, log_pt)?;
    let terms = tape.mul(ps, gap)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Logit distillation on aligned class scores `[R, C]` in `(0, 1)`.
pub fn kd_logits(tape: &mut Tape, p_tc: Var, p_st: Var, cfg: &DistillConfig) -> Result<Var> {
    let p_tc = tape.detach(p_tc);
    let gate: Vec<bool> = tape.value(p_tc).data().iter().map(|&p| p > cfg.gate_threshold).collect();
    let n = gate.len();
    if n == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let flat = tape.reshape(p_st, &[n, 1])?;
    if cfg.literal_logits {
        let k = Tensor::new(&[n, 1], gate.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect())?;
        let k = tape.constant(k);
        let coef = tape.sub(k, flat)?;
        let log_p = tape.log(flat)?;
        let terms = tape.mul(coef, log_p)?;
        let m = tape.mean(terms)?;
        return tape.scale(m, -cfg.alpha_t);
    }
    let picked: Vec<Option<usize>> = (0..n).filter(|&i| gate[i]).map(Some).collect();
    if picked.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let p = tape.gather_rows(flat, &picked)?;
    let log_p = tape.log(p)?;
    let miss = tape.neg(p)?;
    let miss = tape.add_scalar(miss, 1.0)?;
    let terms = tape.mul(miss, log_p)?;
    let m = tape.mean(terms)?;
    tape.scale(m, -cfg.alpha_t)
}

/// Weighted composition of the terms, rejecting any non-finite value.
pub fn total_loss(parts: &LossParts, cfg: &DistillConfig, step: usize) -> Result<LossReport> {
    let named = [
        ("seg", parts.seg),
        ("shallow", parts.shallow),
        ("deep", parts.deep),
        ("span", parts.span),
        ("logits", parts.logits),
        ("cls", parts.cls),
        ("reg", parts.reg),
    ];
    if let Some((term, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            term: (*term).to_string(),
        });
    }
    let feats = cfg.alpha1 * parts.shallow + cfg.alpha2 * parts.deep;
    let kd = cfg.lambda1 * feats + cfg.lambda2 * parts.span + cfg.lambda3 * parts.logits;
    let total = kd + parts.seg + parts.reg + parts.cls;
    if !total.is_finite() {
        return Err(Error::Divergence {
            step,
            term: "total".into(),
        });
    }
    Ok(LossReport {
        seg: parts.seg,
        shallow: parts.shallow,
        deep: parts.deep,
        feats,
        span: parts.span,
        logits: parts.logits,
        cls: parts.cls,
        reg: parts.reg,
        kd,
        total,
    })
}

/// Tape handles for every term of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub seg: Var,
    pub cls: Var,
    pub reg: Var,
    pub feats: Option<FeatLosses>,
    pub span: Option<Var>,
    pub logits: Option<Var>,
}

/// Differentiable total in the same association order as [`total_loss`].
pub fn total_objective(tape: &mut Tape, vars: &LossVars, cfg: &DistillConfig) -> Result<Var> {
    let zero = tape.constant(Tensor::scalar(0.0));
    let feats = vars.feats.map(|f| f.feats).unwrap_or(zero);
    let span = vars.span.unwrap_or(zero);
    let logits = vars.logits.unwrap_or(zero);
    let a = tape.scale(feats, cfg.lambda1)?;
    let b = tape.scale(span, cfg.lambda2)?;
    let c = tape.scale(logits, cfg.lambda3)?;
    let kd = tape.add(a, b)?;
    let kd = tape.add(kd, c)?;
    let t = tape.add(kd, vars.seg)?;
    let t = tape.add(t, vars.reg)?;
    tape.add(t, vars.cls)
}

/// Scalar values of `vars` for reporting.
pub fn loss_parts(tape: &Tape, vars: &LossVars) -> Result<LossParts> {
    let get = |v: Option<Var>| -> Result<f64> { v.map_or(Ok(0.0), |v| tape.value(v).item()) };
    Ok(LossParts {
        seg: tape.value(vars.seg).item()?,
        shallow: get(vars.feats.map(|f| f.shallow))?,
        deep: get(vars.feats.map(|f| f.deep))?,
        span: get(vars.span)?,
        logits: get(vars.logits)?,
        cls: tape.value(vars.cls).item()?,
        reg: tape.value(vars.reg).item()?,
    })
}

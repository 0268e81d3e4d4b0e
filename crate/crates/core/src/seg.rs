//! Foreground segmentation, focal loss and confidence-gated voxel diffusion.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::nn::Mlp;
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;
use crate::voxel::{hash_coord, index_of, unhash_coord, GridConfig, SparseVoxelSet, VoxelCoord};

/// Probabilities are kept inside `[PROB_EPS, 1 − PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("focal alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.gamma == 0.0 || self.gamma >= 1.0) {
            return Err(Error::Config(format!("focal gamma {} must be 0 or at least 1", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SegHead {
    pub mlp: Mlp,
}

impl SegHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, width, hidden, 1, rng)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    /// `[N]` raw scores.
    pub logits: Var,
    /// `[N]` clamped sigmoid probabilities.
    pub probs: Var,
}

pub fn seg_forward(tape: &mut Tape, params: &Binding, head: &SegHead, feats: Var) -> Result<SegOutput> {
    let n = tape.dims(feats)[0];
    let logits = head.mlp.forward(tape, params, feats)?;
    let logits = tape.reshape(logits, &[n])?;
    let probs = tape.sigmoid(logits)?;
    let probs = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    Ok(SegOutput { logits, probs })
}

/// True where the voxel center lies inside any box (closed, yaw-aware).
pub fn label_coords(coords: &[VoxelCoord], grid: &GridConfig, boxes: &[Box3D]) -> Result<Vec<bool>> {
    for b in boxes {
        b.validate()?;
    }
    Ok(coords
        .iter()
        .map(|&c| {
            let p = grid.center(c);
            boxes.iter().any(|b| b.contains(p, 0.0))
        })
        .collect())
}

pub fn label_voxels(set: &SparseVoxelSet, boxes: &[Box3D]) -> Result<Vec<bool>> {
    label_coords(set.coords(), set.grid(), boxes)
}

/// Element-wise binary focal loss of probabilities `probs` against 0/1 `targets`.
pub fn focal_loss(tape: &mut Tape, probs: Var, targets: &[f64], cfg: FocalConfig) -> Result<Var> {
    cfg.validate()?;
    let dims = tape.dims(probs).to_vec();
    if targets.len() != tape.value(probs).numel() {
        return Err(Error::Dimension {
            op: "focal_loss",
            lhs: dims,
            rhs: vec![targets.len()],
        });
    }
    let sign = tape.constant(Tensor::new(&dims, targets.iter().map(|t| 2.0 * t - 1.0).collect())?);
    let offset = tape.constant(Tensor::new(&dims, targets.iter().map(|t| 1.0 - t).collect())?);
    let weight = Tensor::new(
        &dims,
        targets
            .iter()
            .map(|t| -(t * cfg.alpha + (1.0 - t) * (1.0 - cfg.alpha)))
            .collect(),
    )?;
    let weight = tape.constant(weight);
    // p_t: probability assigned to the true label.
    let pt = tape.mul(probs, sign)?;
    let pt = tape.add(pt, offset)?;
    let log_pt = tape.log(pt)?;
    let mut loss = tape.mul(log_pt, weight)?;
    if cfg.gamma > 0.0 {
        let miss = tape.neg(pt)?;
        let miss = tape.add_scalar(miss, 1.0)?;
        let modulation = tape.powf(miss, cfg.gamma)?;
        loss = tape.mul(loss, modulation)?;
    }
    Ok(loss)
}

/// Mean focal loss over all voxels.
pub fn focal_seg_loss(tape: &mut Tape, out: &SegOutput, labels: &[bool], cfg: FocalConfig) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("segmentation loss over zero voxels"));
    }
    let targets: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let per_voxel = focal_loss(tape, out.probs, &targets, cfg)?;
    tape.mean(per_voxel)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Voxels with foreground probability strictly above this diffuse.
    pub threshold: f64,
    /// Odd kernel edge k.
    pub kernel: usize,
    /// Diffuse over a k×k×k block instead of the k×k BEV plane.
    pub kernel_3d: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            kernel: 3,
            kernel_3d: false,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("diffusion kernel {} must be odd", self.kernel)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("diffusion threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Which new voxels diffusion creates and which source rows feed each one.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionPlan {
    /// Source voxel count; output rows `0..base` are the inputs unchanged.
    pub base: usize,
    /// Output coordinates: the source coords followed by the new ones in hash order.
    pub coords: Vec<VoxelCoord>,
    /// Source row of every contribution.
    pub source: Rc<[Option<usize>]>,
    /// New-voxel index (0-based among new voxels) of every contribution.
    pub target: Rc<[Option<usize>]>,
    /// Contributor count of every new voxel.
    pub counts: Vec<usize>,
}

impl DiffusionPlan {
    pub fn added(&self) -> usize {
        self.coords.len() - self.base
    }
}

pub fn plan_diffusion(coords: &[VoxelCoord], grid: &GridConfig, probs: &[f64], cfg: DiffusionConfig) -> Result<DiffusionPlan> {
    cfg.validate()?;
    if probs.len() != coords.len() {
        return Err(Error::Dimension {
            op: "diffusion",
            lhs: vec![coords.len()],
            rhs: vec![probs.len()],
        });
    }
    let existing = index_of(coords);
    let r = (cfg.kernel / 2) as i32;
    let zr = if cfg.kernel_3d { r } else { 0 };
    let mut fresh: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, (&c, &p)) in coords.iter().zip(probs).enumerate() {
        if p <= cfg.threshold {
            continue;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -zr..=zr {
                    let n = c.offset(dx, dy, dz);
                    if !grid.in_range(n) {
                        continue;
                    }
                    let key = hash_coord(n)?;
                    if !existing.contains_key(&key) {
                        fresh.entry(key).or_default().push(i);
                    }
                }
            }
        }
    }
    let mut out_coords = coords.to_vec();
    let mut source = Vec::new();
    let mut target = Vec::new();
    let mut counts = Vec::with_capacity(fresh.len());
    for (j, (key, srcs)) in fresh.into_iter().enumerate() {
        out_coords.push(unhash_coord(key));
        counts.push(srcs.len());
        for s in srcs {
            source.push(Some(s));
            target.push(Some(j));
        }
    }
    Ok(DiffusionPlan {
        base: coords.len(),
        coords: out_coords,
        source: source.into(),
        target: target.into(),
        counts,
    })
}

/// Features of the diffused set on the tape: inputs unchanged, each new row the
/// mean of its contributors.
pub fn apply_diffusion(tape: &mut Tape, feats: Var, plan: &DiffusionPlan) -> Result<Var> {
    if plan.added() == 0 {
        return Ok(feats);
    }
    let width = tape.dims(feats)[1];
    let picked = tape.gather_rows(feats, &plan.source)?;
    let summed = tape.scatter_add_rows(picked, &plan.target, plan.added())?;
    let inv = Tensor::from_fn(&[plan.added(), width], |i| 1.0 / plan.counts[i / width] as f64)?;
    let inv = tape.constant(inv);
    let fresh = tape.mul(summed, inv)?;
    tape.concat(&[feats, fresh], 0)
}

/// Value-level diffusion of a whole voxel set.
pub fn diffuse(set: &SparseVoxelSet, probs: &[f64], cfg: DiffusionConfig) -> Result<SparseVoxelSet> {
    let plan = plan_diffusion(set.coords(), set.grid(), probs, cfg)?;
    let mut tape = Tape::new();
    let f = tape.constant(set.features().clone());
    let out = apply_diffusion(&mut tape, f, &plan)?;
    SparseVoxelSet::new(plan.coords, tape.value(out).clone(), set.grid().clone())
}

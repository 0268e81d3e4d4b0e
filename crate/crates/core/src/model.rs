//! End-to-end sparse voxel detector with either encoder family.
//!
//! voxelize → embed → group → encoder → scatter → segmentation → diffusion →
//! group → encoder → scatter → detection head. The second encoder stage runs on
//! the diffused set and can be switched off.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::group::{GroupConfig, GroupLayout};
use crate::head::{assign_targets, class_probs, decode_and_nms, det_losses, head_forward, DecodeConfig, DetHead, DetOutput, Detection, Targets};
use crate::nn::Linear;
use crate::params::{Binding, ParamStore};
use crate::seg::{apply_diffusion, focal_seg_loss, label_voxels, plan_diffusion, seg_forward, DiffusionConfig, DiffusionPlan, FocalConfig, SegHead, SegOutput};
use crate::student::{StudentConfig, StudentEncoder};
use crate::teacher::{TeacherConfig, TeacherEncoder};
use crate::voxel::{voxelize, GridConfig, PointCloud, SparseVoxelSet, VoxelCoord, RAW_FEATURES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: GridConfig,
    pub group: GroupConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub classes: usize,
    pub head_hidden: usize,
    pub seg_hidden: usize,
    /// Run a second encoder stage on the diffused voxels.
    pub post_stage: bool,
    pub diffusion: DiffusionConfig,
    pub focal: FocalConfig,
    /// Target assignment radius in voxels.
    pub assign_radius: f64,
    pub decode: DecodeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            group: GroupConfig::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            classes: 3,
            head_hidden: 64,
            seg_hidden: 32,
            post_stage: true,
            diffusion: DiffusionConfig::default(),
            focal: FocalConfig::default(),
            assign_radius: 2.0,
            decode: DecodeConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.group.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.diffusion.validate()?;
        self.focal.validate()?;
        if self.classes == 0 || self.head_hidden == 0 || self.seg_hidden == 0 {
            return Err(Error::Config("class count and head widths must be positive".into()));
        }
        if self.assign_radius.is_nan() || self.assign_radius < 0.0 {
            return Err(Error::Config("assignment radius must be non-negative".into()));
        }
        Ok(())
    }

    pub fn width(&self, kind: EncoderKind) -> usize {
        match kind {
            EncoderKind::Teacher => self.teacher.width,
            EncoderKind::Student => self.student.width,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Teacher(TeacherEncoder),
    Student(StudentEncoder),
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, kind: EncoderKind, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            EncoderKind::Teacher => Encoder::Teacher(TeacherEncoder::new(store, name, &cfg.teacher, rng)?),
            EncoderKind::Student => Encoder::Student(StudentEncoder::new(store, name, &cfg.student, rng)?),
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, x: Var, layout: &GroupLayout) -> Result<Var> {
        match self {
            Encoder::Teacher(e) => e.forward(tape, params, x, layout),
            Encoder::Student(e) => e.forward(tape, params, x, layout),
        }
    }
}

/// Voxelized scene with its labels and first-stage grouping.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub voxels: SparseVoxelSet,
    pub boxes: Vec<Box3D>,
    pub seg_labels: Vec<bool>,
    pub layout: GroupLayout,
}

impl PreparedScene {
    pub fn new(cloud: &PointCloud, boxes: Vec<Box3D>, cfg: &ModelConfig) -> Result<Self> {
        let voxels = voxelize(cloud, &cfg.grid)?;
        if voxels.is_empty() {
            return Err(Error::Empty("scene has no points inside the grid"));
        }
        let seg_labels = label_voxels(&voxels, &boxes)?;
        let layout = GroupLayout::build(voxels.coords(), cfg.group)?;
        Ok(Self {
            voxels,
            boxes,
            seg_labels,
            layout,
        })
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// First-stage grouped output `[G, L, D]` (on the scene's layout).
    pub shallow: Var,
    /// First-stage per-voxel features `[N, D]`.
    pub pre: Var,
    pub seg: SegOutput,
    pub plan: DiffusionPlan,
    /// Final per-voxel features `[M, D]` on `plan.coords`.
    pub deep: Var,
    pub det: DetOutput,
}

impl ForwardOut {
    pub fn coords(&self) -> &[VoxelCoord] {
        &self.plan.coords
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub kind: EncoderKind,
    pub cfg: ModelConfig,
    pub embed: Linear,
    pub stage1: Encoder,
    pub stage2: Option<Encoder>,
    pub seg: SegHead,
    pub head: DetHead,
}

fn group_rows(tape: &mut Tape, x: Var, layout: &GroupLayout) -> Result<Var> {
    let width = tape.dims(x)[1];
    let g = tape.gather_rows(x, layout.origin())?;
    tape.reshape(g, &[layout.groups(), layout.len(), width])
}

fn scatter_rows(tape: &mut Tape, y: Var, layout: &GroupLayout) -> Result<Var> {
    let width = tape.dims(y)[2];
    let flat = tape.reshape(y, &[layout.groups() * layout.len(), width])?;
    tape.scatter_add_rows(flat, layout.origin(), layout.sources())
}

impl Detector {
    /// Registers all parameters under `prefix` in `store`.
    pub fn new(store: &mut ParamStore, prefix: &str, kind: EncoderKind, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width(kind);
        let embed = Linear::new(store, &format!("{prefix}.embed"), RAW_FEATURES, d, rng)?;
        let stage1 = Encoder::new(store, &format!("{prefix}.enc1"), kind, cfg, rng)?;
        let stage2 = if cfg.post_stage {
            Some(Encoder::new(store, &format!("{prefix}.enc2"), kind, cfg, rng)?)
        } else {
            None
        };
        let seg = SegHead::new(store, &format!("{prefix}.seg"), d, cfg.seg_hidden, rng)?;
        let head = DetHead::new(store, &format!("{prefix}.head"), d, cfg.head_hidden, cfg.classes, rng)?;
        Ok(Self {
            kind,
            cfg: cfg.clone(),
            embed,
            stage1,
            stage2,
            seg,
            head,
        })
    }

    pub fn width(&self) -> usize {
        self.cfg.width(self.kind)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Binding, scene: &PreparedScene) -> Result<ForwardOut> {
        let raw = tape.constant(scene.voxels.features().clone());
        let x = self.embed.forward(tape, params, raw)?;
        let grouped = group_rows(tape, x, &scene.layout)?;
        let shallow = self.stage1.forward(tape, params, grouped, &scene.layout)?;
        let pre = scatter_rows(tape, shallow, &scene.layout)?;

        let seg = seg_forward(tape, params, &self.seg, pre)?;
        let probs = tape.value(seg.probs).data().to_vec();
        let plan = plan_diffusion(scene.voxels.coords(), &self.cfg.grid, &probs, self.cfg.diffusion)?;
        let post = apply_diffusion(tape, pre, &plan)?;

        let deep = match &self.stage2 {
            Some(enc) => {
                let layout = GroupLayout::build(&plan.coords, self.cfg.group)?;
                let g = group_rows(tape, post, &layout)?;
                let y = enc.forward(tape, params, g, &layout)?;
                scatter_rows(tape, y, &layout)?
            }
            None => post,
        };
        let det = head_forward(tape, params, &self.head, deep)?;
        Ok(ForwardOut {
            shallow,
            pre,
            seg,
            plan,
            deep,
            det,
        })
    }

    pub fn targets(&self, scene: &PreparedScene, out: &ForwardOut) -> Result<Targets> {
        assign_targets(out.coords(), &self.cfg.grid, &scene.boxes, self.cfg.classes, self.cfg.assign_radius)
    }

    /// `(L_seg, L_cls, L_reg)` for one forward pass.
    pub fn label_losses(&self, tape: &mut Tape, scene: &PreparedScene, out: &ForwardOut) -> Result<(Var, Var, Var)> {
        let seg = focal_seg_loss(tape, &out.seg, &scene.seg_labels, self.cfg.focal)?;
        let targets = self.targets(scene, out)?;
        let (cls, reg) = det_losses(tape, &out.det, &targets, self.cfg.focal)?;
        Ok((seg, cls, reg))
    }

    /// Decoded, suppressed detections for one scene.
    pub fn predict(&self, store: &ParamStore, scene: &PreparedScene) -> Result<Vec<Detection>> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &params, scene)?;
        let probs = class_probs(&mut tape, &out.det)?;
        decode_and_nms(
            tape.value(probs),
            tape.value(out.det.reg),
            out.coords(),
            &self.cfg.grid,
            &self.cfg.decode,
        )
    }
}

//! Teacher training, student distillation and the shared per-epoch scoring pass.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use fasd::autodiff::Tape;
use fasd::distill::{
    adapter_mask, adapter_mask_values, kd_feats, kd_logits, kd_span, loss_parts, total_loss, total_objective,
    FeatureTaps, LossReport, LossVars,
};
use fasd::head::{class_probs, decode_and_nms, eval_bev_ap, ApReport, Detection};
use fasd::model::{Detector, EncoderKind, ModelConfig, PreparedScene};
use fasd::optim::AdamW;
use fasd::voxel::{intersect_coord_lists, VoxelCoord};
use fasd::{Error, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::scene::{gen_scene, SceneSpec};

pub struct Split {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

/// Generates and voxelizes scenes `indices` in parallel; order is preserved.
pub fn prepare_scenes(spec: &SceneSpec, model: &ModelConfig, indices: std::ops::Range<usize>) -> Result<Vec<PreparedScene>> {
    indices
        .into_par_iter()
        .map(|i| {
            let s = gen_scene(spec, i)?;
            PreparedScene::new(&s.cloud, s.boxes, model).with_context(|| format!("preparing scene {i}"))
        })
        .collect()
}

/// Train scenes take indices `0..train`, validation scenes the next `val`.
pub fn load_split(cfg: &RunConfig) -> Result<Split> {
    let n = cfg.train.train_scenes;
    Ok(Split {
        train: prepare_scenes(&cfg.data, &cfg.model, 0..n)?,
        val: prepare_scenes(&cfg.data, &cfg.model, n..n + cfg.train.val_scenes)?,
    })
}

fn init_rng(seed: u64, kind: EncoderKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match kind {
        EncoderKind::Teacher => 1,
        EncoderKind::Student => 2,
    });
    rng
}

fn order_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch as u64);
    rng
}

pub fn build_model(kind: EncoderKind, cfg: &ModelConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Detector::new(&mut store, kind.prefix(), kind, cfg, &mut init_rng(seed, kind))?;
    Ok((model, store))
}

trait Prefix {
    fn prefix(self) -> &'static str;
}

impl Prefix for EncoderKind {
    fn prefix(self) -> &'static str {
        match self {
            EncoderKind::Teacher => "teacher",
            EncoderKind::Student => "student",
        }
    }
}

/// A trained teacher with its own model configuration.
pub struct FrozenTeacher {
    pub model: Detector,
    pub store: ParamStore,
}

/// Teacher outputs for one scene; the teacher is frozen so these are exact for
/// every student step.
#[derive(Clone, Debug)]
pub struct TeacherCache {
    pub shallow: Tensor,
    pub deep: Tensor,
    pub coords: Vec<VoxelCoord>,
    pub probs: Tensor,
}

impl FrozenTeacher {
    /// Rebuilds the teacher from `model_cfg` and loads `store` into it.
    pub fn new(model_cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, mut fresh) = build_model(EncoderKind::Teacher, model_cfg, 0)?;
        fresh.assign(store)?;
        Ok(Self { model, store: fresh })
    }

    pub fn cache(&self, scenes: &[PreparedScene]) -> Result<Vec<TeacherCache>> {
        scenes
            .par_iter()
            .map(|scene| {
                let mut tape = Tape::new();
                let params = self.store.bind(&mut tape, false);
                let out = self.model.forward(&mut tape, &params, scene)?;
                let probs = class_probs(&mut tape, &out.det)?;
                Ok(TeacherCache {
                    shallow: tape.value(out.shallow).clone(),
                    deep: tape.value(out.deep).clone(),
                    coords: out.plan.coords.clone(),
                    probs: tape.value(probs).clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub scene: usize,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_map: f64,
    pub val_per_class: Vec<Option<f64>>,
    /// Mean student-teacher deep feature distance on shared voxels.
    pub feature_gap: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Detector,
    /// Parameters of the epoch with the best validation mAP.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_map: f64,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Per-scene results of one inference pass.
#[derive(Clone, Debug)]
pub struct SceneScore {
    pub detections: Vec<Detection>,
    pub gap_sum: f64,
    pub gap_rows: usize,
    pub value_bytes: usize,
    pub latency_ms: f64,
}

/// Inference over `scenes`; with `caches`, also the deep feature distance to the teacher.
pub fn score_scenes(
    model: &Detector,
    store: &ParamStore,
    scenes: &[PreparedScene],
    caches: Option<&[TeacherCache]>,
) -> Result<Vec<SceneScore>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let start = Instant::now();
            let mut tape = Tape::new();
            let params = store.bind(&mut tape, false);
            let out = model.forward(&mut tape, &params, scene)?;
            let probs = class_probs(&mut tape, &out.det)?;
            let detections = decode_and_nms(
                tape.value(probs),
                tape.value(out.det.reg),
                out.coords(),
                &model.cfg.grid,
                &model.cfg.decode,
            )?;
            let latency_ms = start.elapsed().as_secs_f64() * 1e3;
            let (mut gap_sum, mut gap_rows) = (0.0, 0);
            if let Some(caches) = caches {
                let t = &caches[i];
                let v_com = intersect_coord_lists(&t.coords, out.coords());
                let s_rows = adapter_mask_values(tape.value(out.deep), out.coords(), &v_com)?;
                let t_rows = adapter_mask_values(&t.deep, &t.coords, &v_com)?;
                for r in 0..v_com.len() {
                    let d2: f64 = s_rows.row(r).iter().zip(t_rows.row(r)).map(|(a, b)| (a - b) * (a - b)).sum();
                    gap_sum += d2.sqrt();
                }
                gap_rows = v_com.len();
            }
            Ok(SceneScore {
                detections,
                gap_sum,
                gap_rows,
                value_bytes: tape.value_bytes(),
                latency_ms,
            })
        })
        .collect::<fasd::Result<Vec<_>>>()
        .map_err(Into::into)
}

pub fn ap_of(scores: &[SceneScore], scenes: &[PreparedScene], iou: f64, classes: usize) -> Result<ApReport> {
    let preds: Vec<Vec<Detection>> = scores.iter().map(|s| s.detections.clone()).collect();
    let gts: Vec<_> = scenes.iter().map(|s| s.boxes.clone()).collect();
    Ok(eval_bev_ap(&preds, &gts, iou, classes)?)
}

pub fn feature_gap(scores: &[SceneScore]) -> Option<f64> {
    let rows: usize = scores.iter().map(|s| s.gap_rows).sum();
    (rows > 0).then(|| scores.iter().map(|s| s.gap_sum).sum::<f64>() / rows as f64)
}

fn divergence(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            term: format!("forward ({op})"),
        },
        other => other,
    }
}

struct Mentor<'a> {
    teacher: &'a FrozenTeacher,
    train: Vec<TeacherCache>,
    val: Vec<TeacherCache>,
}

/// Loss terms of one scene; KD terms are present exactly when `mentor` is.
fn step_loss(
    tape: &mut Tape,
    model: &Detector,
    store: &ParamStore,
    scene: &PreparedScene,
    mentor: Option<(&FrozenTeacher, &TeacherCache)>,
    cfg: &RunConfig,
) -> fasd::Result<(fasd::Binding, LossVars)> {
    let params = store.bind(tape, true);
    let out = model.forward(tape, &params, scene)?;
    let (seg, cls, reg) = model.label_losses(tape, scene, &out)?;
    let mut vars = LossVars {
        seg,
        cls,
        reg,
        feats: None,
        span: None,
        logits: None,
    };
    if let Some((teacher, cache)) = mentor {
        let t_shallow = tape.constant(cache.shallow.clone());
        let t_deep = tape.constant(cache.deep.clone());
        let t_taps = FeatureTaps {
            shallow: t_shallow,
            layout: &scene.layout,
            deep: t_deep,
            coords: &cache.coords,
        };
        let s_taps = FeatureTaps {
            shallow: out.shallow,
            layout: &scene.layout,
            deep: out.deep,
            coords: out.coords(),
        };
        vars.feats = Some(kd_feats(tape, t_taps, s_taps, &cfg.distill)?);
        let t_params = teacher.store.bind(tape, false);
        vars.span = Some(kd_span(
            tape,
            out.deep,
            out.coords(),
            t_deep,
            &cache.coords,
            &teacher.model.head,
            &t_params,
            cfg.distill.temperature,
        )?);
        let v_com = intersect_coord_lists(&cache.coords, out.coords());
        let p_st = class_probs(tape, &out.det)?;
        let p_st = adapter_mask(tape, p_st, out.coords(), &v_com)?;
        let p_tc = tape.constant(adapter_mask_values(&cache.probs, &cache.coords, &v_com)?);
        vars.logits = Some(kd_logits(tape, p_tc, p_st, &cfg.distill)?);
    }
    Ok((params, vars))
}

fn train_loop(
    kind: EncoderKind,
    cfg: &RunConfig,
    split: &Split,
    mentor: Option<Mentor<'_>>,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        bail!("training set is empty");
    }
    let (model, mut store) = build_model(kind, &cfg.model, seed)?;
    let mut opt = AdamW::new(cfg.optim.clone(), &store);
    let mut steps = Vec::new();
    let mut records = Vec::new();
    let mut best = (store.clone(), 0, f64::NEG_INFINITY);
    let mut step = 0;
    let total_steps = epochs * split.train.len();
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut order_rng(seed, epoch));
        let mut sum = 0.0;
        for &i in &order {
            let scene = &split.train[i];
            opt.set_lr(cfg.train.schedule.rate(cfg.optim.lr, step, total_steps));
            let mut tape = Tape::new();
            let pair = mentor.as_ref().map(|m| (m.teacher, &m.train[i]));
            let (params, vars) = step_loss(&mut tape, &model, &store, scene, pair, cfg).map_err(|e| divergence(e, step))?;
            let total = total_objective(&mut tape, &vars, &cfg.distill)?;
            let report = total_loss(&loss_parts(&tape, &vars)?, &cfg.distill, step)?;
            let grads = tape.backward(total)?;
            let grads = params.gradients(&tape, &grads);
            opt.step(&mut store, &grads)?;
            sum += report.total;
            steps.push(StepRecord {
                epoch,
                step,
                scene: i,
                loss: report,
            });
            step += 1;
        }
        let (val_map, val_per_class, feature_gap) = if split.val.is_empty() {
            (0.0, Vec::new(), None)
        } else {
            let scores = score_scenes(&model, &store, &split.val, mentor.as_ref().map(|m| m.val.as_slice()))?;
            let ap = ap_of(&scores, &split.val, cfg.train.eval_iou, cfg.model.classes)?;
            (ap.mean_ap, ap.per_class, self::feature_gap(&scores))
        };
        if val_map > best.2 {
            best = (store.clone(), epoch, val_map);
        }
        records.push(EpochRecord {
            epoch,
            mean_total: sum / order.len() as f64,
            val_map,
            val_per_class,
            feature_gap,
        });
    }
    if epochs == 0 {
        best.2 = 0.0;
    }
    Ok(TrainOutcome {
        model,
        best: best.0,
        best_epoch: best.1,
        best_map: best.2,
        steps,
        epochs: records,
    })
}

/// Label-only training of the attention detector.
pub fn train_teacher(cfg: &RunConfig, split: &Split, seed: u64) -> Result<TrainOutcome> {
    train_loop(EncoderKind::Teacher, cfg, split, None, cfg.train.teacher_epochs, seed)
}

/// Student training under the full objective; without a teacher the KD terms
/// are absent and the objective is label-only.
pub fn distill_student(cfg: &RunConfig, split: &Split, teacher: Option<&FrozenTeacher>, seed: u64) -> Result<TrainOutcome> {
    let mentor = match teacher {
        Some(t) => {
            check_compatible(&t.model.cfg, &cfg.model)?;
            Some(Mentor {
                teacher: t,
                train: t.cache(&split.train)?,
                val: t.cache(&split.val)?,
            })
        }
        None => None,
    };
    train_loop(EncoderKind::Student, cfg, split, mentor, cfg.train.student_epochs, seed)
}

/// The teacher must share the voxel grid, grouping and feature width with the student.
pub fn check_compatible(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    let same = teacher.grid == student.grid
        && teacher.group == student.group
        && teacher.classes == student.classes
        && teacher.diffusion == student.diffusion
        && teacher.post_stage == student.post_stage
        && teacher.teacher.width == student.student.width;
    if !same {
        return Err(Error::Config("teacher checkpoint settings do not match the student configuration".into()).into());
    }
    Ok(())
}

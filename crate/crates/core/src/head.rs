//! Sparse per-voxel detection head, target assignment, decoding and BEV AP.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{bev_iou, Box3D};
use crate::nn::Linear;
use crate::params::{Binding, ParamStore};
use crate::seg::{focal_loss, FocalConfig, PROB_EPS};
use crate::tensor::Tensor;
use crate::voxel::{GridConfig, VoxelCoord};

pub const REG_CHANNELS: usize = 8;

/// Initial class bias so every score starts near 0.01.
const PRIOR_BIAS: f64 = -4.59511985013459;

#[derive(Clone, Copy, Debug)]
pub struct DetHead {
    pub classes: usize,
    pub trunk0: Linear,
    pub trunk1: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

impl DetHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let head = Self {
            classes,
            trunk0: Linear::new(store, &format!("{name}.trunk0"), width, hidden, rng)?,
            trunk1: Linear::new(store, &format!("{name}.trunk1"), hidden, hidden, rng)?,
            cls: Linear::new(store, &format!("{name}.cls"), hidden, classes, rng)?,
            reg: Linear::new(store, &format!("{name}.reg"), hidden, REG_CHANNELS, rng)?,
        };
        store.get_mut(head.cls.bias).data_mut().fill(PRIOR_BIAS);
        Ok(head)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetOutput {
    /// `[N, C]`.
    pub cls_logits: Var,
    /// `[N, 8]`.
    pub reg: Var,
}

pub fn head_forward(tape: &mut Tape, params: &Binding, head: &DetHead, feats: Var) -> Result<DetOutput> {
    tape.set_scope(Some("head"));
    let h = head.trunk0.forward(tape, params, feats)?;
    let h = tape.silu(h)?;
    let h = head.trunk1.forward(tape, params, h)?;
    let h = tape.silu(h)?;
    let cls_logits = head.cls.forward(tape, params, h)?;
    let reg = head.reg.forward(tape, params, h)?;
    tape.set_scope(None);
    Ok(DetOutput { cls_logits, reg })
}

/// Clamped class probabilities `[N, C]`.
pub fn class_probs(tape: &mut Tape, out: &DetOutput) -> Result<Var> {
    let p = tape.sigmoid(out.cls_logits)?;
    tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
}

/// Regression code of `b` relative to the voxel at `center`.
pub fn encode_box(b: &Box3D, center: [f64; 3], grid: &GridConfig) -> [f64; REG_CHANNELS] {
    let s = grid.voxel_size;
    [
        (b.center[0] - center[0]) / s[0],
        (b.center[1] - center[1]) / s[1],
        (b.center[2] - center[2]) / s[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

pub fn decode_box(code: &[f64], center: [f64; 3], grid: &GridConfig, class: usize) -> Result<Box3D> {
    let s = grid.voxel_size;
    let c = std::array::from_fn(|i| center[i] + code[i] * s[i]);
    let size = [code[3].exp(), code[4].exp(), code[5].exp()];
    Box3D::new(c, size, code[6].atan2(code[7]), class)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub classes: usize,
    /// `[N·C]` 0/1 heatmap.
    pub cls: Vec<f64>,
    /// Positive voxel rows, one per assigned box.
    pub positives: Vec<usize>,
    /// Box index of every positive.
    pub boxes: Vec<usize>,
    /// `[P·8]` regression codes.
    pub reg: Vec<f64>,
    /// Boxes without any free voxel in radius.
    pub dropped: usize,
}

/// Each box claims the nearest free voxel whose center is within `radius`
/// voxels of the box center (ties go to the lower row).
pub fn assign_targets(
    coords: &[VoxelCoord],
    grid: &GridConfig,
    boxes: &[Box3D],
    classes: usize,
    radius: f64,
) -> Result<Targets> {
    let n = coords.len();
    let centers: Vec<[f64; 3]> = coords.iter().map(|&c| grid.center(c)).collect();
    let mut taken = vec![false; n];
    let mut t = Targets {
        classes,
        cls: vec![0.0; n * classes],
        positives: Vec::new(),
        boxes: Vec::new(),
        reg: Vec::new(),
        dropped: 0,
    };
    for (bi, b) in boxes.iter().enumerate() {
        b.validate()?;
        if b.class >= classes {
            return Err(Error::Contract(format!("box class {} outside {classes} classes", b.class)));
        }
        let mut best: Option<(f64, usize)> = None;
        for (i, c) in centers.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = (0..3)
                .map(|k| ((c[k] - b.center[k]) / grid.voxel_size[k]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        match best {
            Some((_, i)) => {
                taken[i] = true;
                t.cls[i * classes + b.class] = 1.0;
                t.positives.push(i);
                t.boxes.push(bi);
                t.reg.extend(encode_box(b, centers[i], grid));
            }
            None => t.dropped += 1,
        }
    }
    Ok(t)
}

/// `(L_cls, L_reg)`: focal heatmap loss summed and divided by `max(1, P)`, and
/// the mean absolute regression error over positives (exactly 0 without any).
pub fn det_losses(tape: &mut Tape, out: &DetOutput, targets: &Targets, focal: FocalConfig) -> Result<(Var, Var)> {
    let probs = class_probs(tape, out)?;
    let per_entry = focal_loss(tape, probs, &targets.cls, focal)?;
    let total = tape.sum(per_entry)?;
    let l_cls = tape.scale(total, 1.0 / targets.positives.len().max(1) as f64)?;
    let l_reg = if targets.positives.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let idx: Vec<Option<usize>> = targets.positives.iter().map(|&i| Some(i)).collect();
        let picked = tape.gather_rows(out.reg, &idx)?;
        let goal = tape.constant(Tensor::new(&[idx.len(), REG_CHANNELS], targets.reg.clone())?);
        let diff = tape.sub(picked, goal)?;
        let diff = tape.abs(diff)?;
        tape.mean(diff)?
    };
    Ok((l_cls, l_reg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    /// Highest-scoring candidates kept before suppression.
    pub max_candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.1,
            iou_threshold: 0.1,
            max_candidates: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

fn by_score(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn may_overlap(a: &Box3D, b: &Box3D) -> bool {
    let reach = |x: &Box3D| x.size[0].hypot(x.size[1]) / 2.0;
    let d = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    d < reach(a) + reach(b)
}

/// Greedy suppression in descending score order (lower index wins ties);
/// returns kept positions into `boxes`.
pub fn nms(boxes: &[Box3D], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    order.sort_by(by_score);
    let mut kept: Vec<usize> = Vec::new();
    for (_, i) in order {
        let suppressed = kept
            .iter()
            .any(|&k| boxes[k].class == boxes[i].class && may_overlap(&boxes[k], &boxes[i]) && bev_iou(&boxes[k], &boxes[i]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Voxels whose best class score exceeds the threshold decode to boxes, then
/// per-class greedy BEV NMS. Output is in descending score order.
pub fn decode_and_nms(
    probs: &Tensor,
    reg: &Tensor,
    coords: &[VoxelCoord],
    grid: &GridConfig,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    for t in [cfg.score_threshold, cfg.iou_threshold] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("decode threshold {t} outside [0, 1]")));
        }
    }
    let classes = probs.dims().get(1).copied().unwrap_or(0);
    let mut cands: Vec<(f64, usize)> = Vec::new();
    for (i, row) in probs.data().chunks(classes.max(1)).enumerate().take(coords.len()) {
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best > cfg.score_threshold {
            cands.push((best, i));
        }
    }
    cands.sort_by(by_score);
    cands.truncate(cfg.max_candidates);
    let mut boxes = Vec::with_capacity(cands.len());
    let mut scores = Vec::with_capacity(cands.len());
    for &(score, i) in &cands {
        let row = probs.row(i);
        let class = (0..classes).find(|&c| row[c] == score).expect("score comes from the row");
        boxes.push(decode_box(reg.row(i), grid.center(coords[i]), grid, class)?);
        scores.push(score);
    }
    Ok(nms(&boxes, &scores, cfg.iou_threshold)
        .into_iter()
        .map(|k| Detection {
            bbox: boxes[k],
            score: scores[k],
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub iou_threshold: f64,
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth (0 when none has any).
    pub mean_ap: f64,
}

/// 11-point interpolated precision over recall levels 0, 0.1, …, 1.
pub fn eleven_point_ap(hits: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    (0..=10)
        .map(|r| {
            let level = r as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Score-ranked matching per class: a prediction is a hit when its highest-IoU
/// ground truth in the same scene reaches the threshold and is not yet claimed.
pub fn eval_bev_ap(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], iou_threshold: f64, classes: usize) -> Result<ApReport> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension {
            op: "eval_bev_ap",
            lhs: vec![preds.len()],
            rhs: vec![gts.len()],
        });
    }
    let mut per_class = Vec::with_capacity(classes);
    for class in 0..classes {
        let total_gt: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == class).count()).sum();
        if total_gt == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (s, dets) in preds.iter().enumerate() {
            for (k, d) in dets.iter().enumerate() {
                if d.bbox.class == class {
                    ranked.push((d.score, s, k));
                }
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(_, s, k) in &ranked {
            let det = &preds[s][k].bbox;
            let best = gts[s]
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class == class)
                .map(|(j, g)| (bev_iou(det, g), j))
                .fold(None::<(f64, usize)>, |acc, cur| match acc {
                    Some(a) if a.0 >= cur.0 => Some(a),
                    _ => Some(cur),
                });
            let hit = match best {
                Some((iou, j)) if iou >= iou_threshold && !claimed[s][j] => {
                    claimed[s][j] = true;
                    true
                }
                _ => false,
            };
            hits.push(hit);
        }
        per_class.push(Some(eleven_point_ap(&hits, total_gt)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_ap = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(ApReport {
        iou_threshold,
        per_class,
        mean_ap,
    })
}

/// One JSON line per scene: boxes as `[cx, cy, cz, l, w, h, sin yaw, cos yaw]` plus class and score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBoxes {
    pub scene: usize,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub params: [f64; 8],
    pub class: usize,
    pub score: f64,
}

impl BoxRecord {
    pub fn from_box(b: &Box3D, score: f64) -> Self {
        let [cx, cy, cz] = b.center;
        let [l, w, h] = b.size;
        Self {
            params: [cx, cy, cz, l, w, h, b.yaw.sin(), b.yaw.cos()],
            class: b.class,
            score,
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let p = self.params;
        Ok(Detection {
            bbox: Box3D::new([p[0], p[1], p[2]], [p[3], p[4], p[5]], p[6].atan2(p[7]), self.class)?,
            score: self.score,
        })
    }
}

pub fn write_jsonl(scenes: &[SceneBoxes], mut w: impl Write) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<SceneBoxes>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, class: usize) -> Box3D {
        Box3D::new([x, y, 0.5], [2.0, 1.0, 1.0], 0.0, class).unwrap()
    }

    #[test]
    fn contrived_pr_curve() {
        let gts = vec![vec![bx(0.0, 0.0, 0), bx(10.0, 0.0, 0)]];
        let preds = vec![vec![
            Detection { bbox: bx(0.0, 0.0, 0), score: 0.9 },
            Detection { bbox: bx(20.0, 0.0, 0), score: 0.8 },
            Detection { bbox: bx(10.0, 0.0, 0), score: 0.7 },
        ]];
        let r = eval_bev_ap(&preds, &gts, 0.5, 1).unwrap();
        // Points (R, P): (0.5, 1), (0.5, 0.5), (1, 2/3); six levels at 1, five at 2/3.
        let expected = (6.0 + 5.0 * 2.0 / 3.0) / 11.0;
        assert!((r.mean_ap - expected).abs() < 1e-12);
        assert!((expected - 0.848485).abs() < 5e-7);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = vec![vec![bx(0.0, 0.0, 0), bx(5.0, 5.0, 2)]];
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| g.iter().map(|&b| Detection { bbox: b, score: 1.0 }).collect())
            .collect();
        let r = eval_bev_ap(&perfect, &gts, 0.7, 3).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(eval_bev_ap(&[vec![]], &gts, 0.7, 3).unwrap().mean_ap, 0.0);
    }

    #[test]
    fn duplicate_boxes_keep_lower_index() {
        let b = bx(1.0, 1.0, 0);
        assert_eq!(nms(&[b, b], &[0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn centered_box_gets_zero_offset() {
        let grid = GridConfig::default();
        let coords = [VoxelCoord::new(4, 4, 1), VoxelCoord::new(10, 10, 1)];
        let center = grid.center(coords[1]);
        let b = Box3D::new(center, [4.0, 1.8, 1.6], 0.3, 1).unwrap();
        let t = assign_targets(&coords, &grid, &[b], 3, 2.0).unwrap();
        assert_eq!(t.positives, vec![1]);
        assert_eq!(&t.reg[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(t.cls.iter().sum::<f64>(), 1.0);
        assert_eq!(t.cls[3 + 1], 1.0);

        let far = Box3D::new([0.1, 20.0, 0.5], [1.0; 3], 0.0, 0).unwrap();
        assert_eq!(assign_targets(&coords, &grid, &[far], 3, 2.0).unwrap().dropped, 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let scenes = vec![SceneBoxes {
            scene: 3,
            boxes: vec![BoxRecord::from_box(&bx(1.0, 2.0, 1), 0.25)],
        }];
        let mut buf = Vec::new();
        write_jsonl(&scenes, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 1);
        assert_eq!(read_jsonl(buf.as_slice()).unwrap(), scenes);
    }
}

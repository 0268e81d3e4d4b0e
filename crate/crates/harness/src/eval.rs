//! Checkpoint evaluation: BEV AP, memory estimate, latency and exported predictions.

use std::fs;
use std::path::Path;

use anyhow::{bail, Result};
use fasd::head::{BoxRecord, SceneBoxes};
use fasd::model::{Detector, PreparedScene};
use fasd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::report::{write_json, write_jsonl};
use crate::train::{ap_of, feature_gap, score_scenes, TeacherCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    /// Absent when the class has no ground truth in the evaluated scenes.
    pub ap: Option<f64>,
}

/// Deterministic evaluation results; wall-clock figures live in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub scenes: usize,
    pub iou_threshold: f64,
    pub mean_ap: f64,
    pub per_class: Vec<ClassAp>,
    /// Largest total of live tape values over the evaluated scenes, bytes.
    pub peak_value_bytes: usize,
    pub feature_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub per_scene_ms: Vec<f64>,
}

pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub timing: Timing,
    pub predictions: Vec<SceneBoxes>,
}

pub fn evaluate(
    model: &Detector,
    store: &ParamStore,
    scenes: &[PreparedScene],
    first_index: usize,
    iou: f64,
    class_names: &[String],
    caches: Option<&[TeacherCache]>,
) -> Result<Evaluation> {
    if scenes.is_empty() {
        bail!("cannot evaluate on an empty dataset");
    }
    let scores = score_scenes(model, store, scenes, caches)?;
    let ap = ap_of(&scores, scenes, iou, model.cfg.classes)?;
    let per_class = ap
        .per_class
        .iter()
        .enumerate()
        .map(|(c, &ap)| ClassAp {
            name: class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
            ap,
        })
        .collect();
    let per_scene_ms: Vec<f64> = scores.iter().map(|s| s.latency_ms).collect();
    let predictions = scores
        .iter()
        .enumerate()
        .map(|(i, s)| SceneBoxes {
            scene: first_index + i,
            boxes: s.detections.iter().map(|d| BoxRecord::from_box(&d.bbox, d.score)).collect(),
        })
        .collect();
    Ok(Evaluation {
        metrics: EvalMetrics {
            scenes: scenes.len(),
            iou_threshold: iou,
            mean_ap: ap.mean_ap,
            per_class,
            peak_value_bytes: scores.iter().map(|s| s.value_bytes).max().unwrap_or(0),
            feature_gap: feature_gap(&scores),
        },
        timing: Timing {
            mean_ms: per_scene_ms.iter().sum::<f64>() / per_scene_ms.len() as f64,
            max_ms: per_scene_ms.iter().copied().fold(0.0, f64::max),
            per_scene_ms,
        },
        predictions,
    })
}

/// `<stem>.json`, `<stem>_timing.json` and `<stem>_predictions.jsonl` in `dir`.
pub fn write_evaluation(dir: &Path, stem: &str, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(format!("{stem}.json")), &eval.metrics)?;
    write_json(&dir.join(format!("{stem}_timing.json")), &eval.timing)?;
    write_jsonl(&dir.join(format!("{stem}_predictions.jsonl")), &eval.predictions)
}

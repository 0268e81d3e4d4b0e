//! Run directories: checkpoints, run metadata and log files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use fasd::model::EncoderKind;
use fasd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::train::{StepRecord, TrainOutcome};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RUN_FILE: &str = "run.toml";

/// What produced a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub kind: EncoderKind,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_map: f64,
    pub config: RunConfig,
}

#[derive(Serialize)]
struct Summary {
    kind: EncoderKind,
    seed: u64,
    best_epoch: usize,
    best_map: f64,
    steps: usize,
    final_total: Option<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready per-step loss table.
pub fn write_loss_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch", "step", "scene", "seg", "shallow", "deep", "feats", "span", "logits", "cls", "reg", "kd", "total",
    ])?;
    for s in steps {
        let l = &s.loss;
        let mut row = vec![s.epoch.to_string(), s.step.to_string(), s.scene.to_string()];
        row.extend(
            [l.seg, l.shallow, l.deep, l.feats, l.span, l.logits, l.cls, l.reg, l.kd, l.total]
                .iter()
                .map(f64::to_string),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the best checkpoint, run metadata, step and epoch logs into `dir`.
pub fn save_run(dir: &Path, kind: EncoderKind, seed: u64, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    outcome.best.save(dir.join(CHECKPOINT_FILE))?;
    let record = RunRecord {
        kind,
        seed,
        best_epoch: outcome.best_epoch,
        best_map: outcome.best_map,
        config: cfg.clone(),
    };
    fs::write(dir.join(RUN_FILE), toml::to_string(&record)?)?;
    write_jsonl(&dir.join("steps.jsonl"), &outcome.steps)?;
    write_jsonl(&dir.join("epochs.jsonl"), &outcome.epochs)?;
    write_loss_csv(&dir.join("loss_curve.csv"), &outcome.steps)?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            kind,
            seed,
            best_epoch: outcome.best_epoch,
            best_map: outcome.best_map,
            steps: outcome.steps.len(),
            final_total: outcome.steps.last().map(|s| s.loss.total),
        },
    )
}

/// Loads run metadata and parameters written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<(RunRecord, ParamStore)> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let record: RunRecord = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    record.config.validate()?;
    let store = ParamStore::load(dir.join(CHECKPOINT_FILE)).with_context(|| format!("loading checkpoint in {}", dir.display()))?;
    Ok((record, store))
}

pub fn load_kind(dir: &Path, kind: EncoderKind) -> Result<(RunRecord, ParamStore)> {
    let (record, store) = load_run(dir)?;
    if record.kind != kind {
        bail!("{} holds a {:?} checkpoint, expected {:?}", dir.display(), record.kind, kind);
    }
    Ok((record, store))
}

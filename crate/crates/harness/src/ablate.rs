//! KD toggle sweeps: one teacher per seed, one student per (variant, seed).

use std::path::Path;

use anyhow::{Context, Result};
use fasd::distill::DistillConfig;
use fasd::model::EncoderKind;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::eval::{evaluate, write_evaluation, ClassAp};
use crate::report::{save_run, write_json, write_jsonl};
use crate::train::{distill_student, load_split, train_teacher, FrozenTeacher};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub feature: bool,
    pub span: bool,
    pub logits: bool,
}

impl Variant {
    pub fn new(name: &str, feature: bool, span: bool, logits: bool) -> Self {
        Self {
            name: name.into(),
            feature,
            span,
            logits,
        }
    }

    /// `base` with the weights of disabled terms set to zero.
    pub fn apply(&self, base: &DistillConfig) -> DistillConfig {
        let keep = |on: bool, w: f64| if on { w } else { 0.0 };
        DistillConfig {
            lambda1: keep(self.feature, base.lambda1),
            lambda2: keep(self.span, base.lambda2),
            lambda3: keep(self.logits, base.lambda3),
            ..*base
        }
    }
}

/// All eight on/off combinations of the three KD terms.
pub fn toggle_matrix() -> Vec<Variant> {
    (0..8)
        .map(|bits| {
            let (f, s, l) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
            let mut parts = Vec::new();
            if f {
                parts.push("feat");
            }
            if s {
                parts.push("span");
            }
            if l {
                parts.push("logits");
            }
            let name = if parts.is_empty() { "label_only".to_string() } else { parts.join("+") };
            Variant::new(&name, f, s, l)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub run: RunConfig,
    #[serde(default = "toggle_matrix")]
    pub variants: Vec<Variant>,
}

impl SweepFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sweep: Self = toml::from_str(text).context("parsing sweep file")?;
        sweep.run.validate()?;
        anyhow::ensure!(!sweep.variants.is_empty(), "sweep has no variants");
        Ok(sweep)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_map: f64,
    pub per_class: Vec<ClassAp>,
    /// Mean deep feature distance to the teacher on shared voxels.
    pub feature_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub teachers: Vec<TeacherResult>,
    pub students: Vec<VariantResult>,
}

impl SweepReport {
    pub fn of(&self, variant: &str) -> Vec<&VariantResult> {
        self.students.iter().filter(|r| r.variant == variant).collect()
    }

    /// Mean validation mAP of `variant` over seeds.
    pub fn mean_map(&self, variant: &str) -> Option<f64> {
        let rows = self.of(variant);
        (!rows.is_empty()).then(|| rows.iter().map(|r| r.val_map).sum::<f64>() / rows.len() as f64)
    }
}

/// Runs every variant on every seed. With `out`, each run is saved under
/// `out/teacher/seed<S>` and `out/<variant>/seed<S>`, plus `ablation.jsonl` and
/// `ablation.csv` summaries.
pub fn run_sweep(sweep: &SweepFile, out: Option<&Path>) -> Result<SweepReport> {
    let cfg = &sweep.run;
    let split = load_split(cfg)?;
    let names: Vec<String> = cfg.data.classes.iter().map(|c| c.name.clone()).collect();
    let first_val = cfg.train.train_scenes;
    let mut report = SweepReport {
        teachers: Vec::new(),
        students: Vec::new(),
    };
    for &seed in &cfg.train.seeds {
        let t = train_teacher(cfg, &split, seed)?;
        if let Some(out) = out {
            save_run(&out.join("teacher").join(format!("seed{seed}")), EncoderKind::Teacher, seed, cfg, &t)?;
        }
        report.teachers.push(TeacherResult {
            seed,
            best_epoch: t.best_epoch,
            val_map: t.best_map,
        });
        let teacher = FrozenTeacher::new(&cfg.model, &t.best)?;
        let caches = teacher.cache(&split.val)?;
        for v in &sweep.variants {
            let mut vcfg = cfg.clone();
            vcfg.distill = v.apply(&cfg.distill);
            let s = distill_student(&vcfg, &split, Some(&teacher), seed)?;
            let e = evaluate(&s.model, &s.best, &split.val, first_val, cfg.train.eval_iou, &names, Some(&caches))?;
            if let Some(out) = out {
                let dir = out.join(&v.name).join(format!("seed{seed}"));
                save_run(&dir, EncoderKind::Student, seed, &vcfg, &s)?;
                write_evaluation(&dir, "eval_val", &e)?;
            }
            report.students.push(VariantResult {
                variant: v.name.clone(),
                seed,
                best_epoch: s.best_epoch,
                val_map: e.metrics.mean_ap,
                per_class: e.metrics.per_class,
                feature_gap: e.metrics.feature_gap,
            });
        }
    }
    if let Some(out) = out {
        write_jsonl(&out.join("ablation.jsonl"), &report.students)?;
        write_json(&out.join("teachers.json"), &report.teachers)?;
        let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
        let mut header = vec!["variant".to_string(), "seed".into(), "val_map".into(), "feature_gap".into()];
        header.extend(names.iter().map(|n| format!("ap_{n}")));
        w.write_record(&header)?;
        for r in &report.students {
            let mut row = vec![
                r.variant.clone(),
                r.seed.to_string(),
                r.val_map.to_string(),
                r.feature_gap.map_or(String::new(), |g| g.to_string()),
            ];
            row.extend(r.per_class.iter().map(|c| c.ap.map_or(String::new(), |a| a.to_string())));
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(report)
}

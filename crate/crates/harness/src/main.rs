use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fasd::flops::{sweep_report, write_csv, CostQuery};
use fasd::head::{write_jsonl, BoxRecord, SceneBoxes};
use fasd::model::EncoderKind;
use fasd::voxel::write_bin;
use fasd_harness::ablate::{run_sweep, SweepFile};
use fasd_harness::config::RunConfig;
use fasd_harness::eval::{evaluate, write_evaluation};
use fasd_harness::report::{load_kind, load_run, save_run, write_json};
use fasd_harness::scene::gen_scene;
use fasd_harness::train::{distill_student, load_split, prepare_scenes, train_teacher, FrozenTeacher};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "fasd", version, about = "Sparse voxel detectors with attention teachers and state-space students")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes as binary point clouds plus JSON-lines labels.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Defaults to `<output>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the attention teacher on label losses only.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArg,
        /// Train only this seed instead of every configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the state-space student against a frozen teacher.
    Distill {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Teacher run directory; defaults to `<output>/teacher/seed<S>`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Train without a teacher (label losses only).
        #[arg(long, conflicts_with = "teacher")]
        no_teacher: bool,
        /// Subdirectory of the output root for the student runs.
        #[arg(long, default_value = "student")]
        name: String,
    },
    /// Score a saved run on a dataset split.
    Eval {
        /// Run directory holding `model.ckpt` and `run.toml`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitName,
        /// BEV IoU threshold; the run's configured value when omitted.
        #[arg(long)]
        iou: Option<f64>,
        /// Teacher run for the feature-gap statistic.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Directory for the metric files; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic MAC counts for attention and SSM blocks as CSV.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "1")]
        batch: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        len: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "64")]
        width: Vec<u64>,
        #[arg(long, default_value_t = 8)]
        heads: u64,
        #[arg(long, default_value_t = 2)]
        expand: u64,
        #[arg(long, default_value_t = 16)]
        state: u64,
        #[arg(long, default_value_t = 4)]
        d_conv: u64,
        /// Defaults to ceil(width / 16).
        #[arg(long)]
        dt_rank: Option<u64>,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a KD toggle sweep described by one sweep file.
    Ablate {
        #[arg(long)]
        sweep: PathBuf,
    },
}

fn seeds(cfg: &RunConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.train.seeds.clone(), |s| vec![s])
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let n = cfg.train.train_scenes;
    for (split, range) in [("train", 0..n), ("val", n..n + cfg.train.val_scenes)] {
        let dir = out.join(split);
        fs::create_dir_all(&dir)?;
        let labels = range
            .into_par_iter()
            .map(|i| {
                let s = gen_scene(&cfg.data, i)?;
                let file = fs::File::create(dir.join(format!("scene_{i:05}.bin")))?;
                write_bin(&s.cloud, std::io::BufWriter::new(file))?;
                Ok(SceneBoxes {
                    scene: i,
                    boxes: s.boxes.iter().map(|b| BoxRecord::from_box(b, 1.0)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_jsonl(&labels, fs::File::create(dir.join("labels.jsonl"))?)?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| cfg.out_dir().join("data"));
            gen_data(&cfg, &out)?;
            println!("wrote scenes to {}", out.display());
        }
        Command::TrainTeacher { config, seed } => {
            let cfg = config.load()?;
            let split = load_split(&cfg)?;
            for seed in seeds(&cfg, seed) {
                let t = train_teacher(&cfg, &split, seed)?;
                let dir = cfg.out_dir().join("teacher").join(format!("seed{seed}"));
                save_run(&dir, EncoderKind::Teacher, seed, &cfg, &t)?;
                println!("teacher seed {seed}: best val mAP {:.4} at epoch {}", t.best_map, t.best_epoch);
            }
        }
        Command::Distill {
            config,
            seed,
            teacher,
            no_teacher,
            name,
        } => {
            let cfg = config.load()?;
            let split = load_split(&cfg)?;
            for seed in seeds(&cfg, seed) {
                let frozen = if no_teacher {
                    None
                } else {
                    let dir = teacher.clone().unwrap_or_else(|| cfg.out_dir().join("teacher").join(format!("seed{seed}")));
                    let (record, store) = load_kind(&dir, EncoderKind::Teacher)?;
                    Some(FrozenTeacher::new(&record.config.model, &store)?)
                };
                let s = distill_student(&cfg, &split, frozen.as_ref(), seed)?;
                let dir = cfg.out_dir().join(&name).join(format!("seed{seed}"));
                save_run(&dir, EncoderKind::Student, seed, &cfg, &s)?;
                println!("student seed {seed}: best val mAP {:.4} at epoch {}", s.best_map, s.best_epoch);
            }
        }
        Command::Eval {
            run,
            split,
            iou,
            teacher,
            out,
        } => {
            let (record, store) = load_run(&run)?;
            let cfg = &record.config;
            let (model, mut fresh) = fasd_harness::train::build_model(record.kind, &cfg.model, 0)?;
            fresh.assign(&store).context("checkpoint does not match its run configuration")?;
            let n = cfg.train.train_scenes;
            let (stem, range) = match split {
                SplitName::Train => ("eval_train", 0..n),
                SplitName::Val => ("eval_val", n..n + cfg.train.val_scenes),
            };
            let first = range.start;
            let scenes = prepare_scenes(&cfg.data, &cfg.model, range)?;
            let caches = match teacher {
                Some(dir) => {
                    let (t_record, t_store) = load_kind(&dir, EncoderKind::Teacher)?;
                    let frozen = FrozenTeacher::new(&t_record.config.model, &t_store)?;
                    Some(frozen.cache(&scenes)?)
                }
                None => None,
            };
            let names: Vec<String> = cfg.data.classes.iter().map(|c| c.name.clone()).collect();
            let e = evaluate(
                &model,
                &fresh,
                &scenes,
                first,
                iou.unwrap_or(cfg.train.eval_iou),
                &names,
                caches.as_deref(),
            )?;
            let out = out.unwrap_or(run);
            write_evaluation(&out, stem, &e)?;
            println!("{}", serde_json::to_string_pretty(&e.metrics)?);
        }
        Command::Flops {
            batch,
            len,
            width,
            heads,
            expand,
            state,
            d_conv,
            dt_rank,
            out,
        } => {
            let base = CostQuery {
                heads,
                expand,
                state,
                d_conv,
                dt_rank,
                ..CostQuery::attention(1, 1, 1)
            };
            let rows = sweep_report(&batch, &len, &width, &base)?;
            match out {
                Some(p) => write_csv(&rows, fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?)?,
                None => write_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Command::Ablate { sweep } => {
            let sweep = SweepFile::load(&sweep)?;
            let out = sweep.run.out_dir().join("ablation");
            let report = run_sweep(&sweep, Some(&out))?;
            write_json(&out.join("report.json"), &report)?;
            for v in &sweep.variants {
                if let Some(m) = report.mean_map(&v.name) {
                    println!("{:<20} mean val mAP {m:.4}", v.name);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

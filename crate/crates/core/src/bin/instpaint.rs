use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use instpaint::config::Config;
use instpaint::error::{Error, Result, Stage, StageExt};
use instpaint::fp_augment::{mine_false_positives, paste_samples, FpDatabase, FpRecord};
use instpaint::io::{read_augmented, read_ground_truth, read_scene, write_atomic, write_augmented};
use instpaint::metrics::evaluate;
use instpaint::painter::Instance3DPrior;
use instpaint::pipeline::{fuse_stage, paint_stage, refine_stage, run_pipeline, synthesize, PRIORS_FILE};
use instpaint::refiner::RefinerConfig;
use instpaint::scene::{stack_sweeps, Box3D};

#[derive(Parser)]
#[command(name = "instpaint", version, about = "LiDAR instance painting pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set refiner.enabled=false`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random choice (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        boxes: Option<usize>,
        #[arg(long)]
        sweeps: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
        /// Extrinsic rotation jitter, degrees.
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        occluders: Option<usize>,
    },
    /// Stack, project and paint; writes raw priors and a painted cloud.
    Paint {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refine priors written by `paint`.
    Refine {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cascaded attention fusion of an augmented cloud.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        /// Features as little-endian f32 rows; a `.json` summary is written
        /// alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// False-positive database tools.
    #[command(name = "augment-fp", subcommand)]
    AugmentFp(FpCommand),
    /// Score an augmented cloud against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Refined priors (for center error and purity).
        #[arg(long)]
        priors: Option<PathBuf>,
    },
    /// Full run: paint, refine, write, evaluate.
    Pipeline {
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the refiner.
        #[arg(long)]
        no_refine: bool,
    },
}

#[derive(Subcommand)]
enum FpCommand {
    /// Mine detections that match no ground truth and store their crops.
    Build {
        #[arg(long)]
        scene: Option<PathBuf>,
        /// JSON array of detected boxes.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long)]
        iou_threshold: Option<f64>,
    },
    /// Paste stored false positives into an augmented cloud.
    Paste {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        db: Option<PathBuf>,
        /// Scene whose ground-truth boxes block placements.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn push(overrides: &mut Vec<String>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        overrides.push(format!("{key}={v}"));
    }
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| toml::Value::String(p.display().to_string()).to_string())
}

fn load_config(common: &Common, extra: Vec<String>) -> Result<Config> {
    let mut overrides = common.overrides.clone();
    overrides.extend(extra);
    push(&mut overrides, "seed", common.seed.map(|s| s.to_string()));
    Config::load(common.config.as_deref(), &overrides).stage(Stage::Config)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            boxes,
            sweeps,
            density,
            jitter,
            occluders,
        } => {
            let mut o = Vec::new();
            push(&mut o, "synth.box_count", boxes.map(|v| v.to_string()));
            push(&mut o, "synth.sweeps", sweeps.map(|v| v.to_string()));
            push(&mut o, "synth.density", density.map(|v| format!("{v:?}")));
            push(&mut o, "synth.noise.rotation_jitter_deg", jitter.map(|v| format!("{v:?}")));
            push(&mut o, "synth.noise.occluders", occluders.map(|v| v.to_string()));
            let config = load_config(&cli.common, o)?;
            let scene = synthesize(&config, &out)?;
            println!(
                "wrote {} points, {} boxes, {} cameras to {}",
                scene.points.len(),
                scene.gt_boxes.len(),
                scene.rig.camera_count(),
                out.display()
            );
        }
        Command::Paint { scene, out } => {
            let mut o = Vec::new();
            push(&mut o, "io.scene_dir", path_value(&scene));
            push(&mut o, "io.output_dir", path_value(&out));
            let config = load_config(&cli.common, o)?;
            let data = read_scene(&config.io.scene_dir).stage(Stage::Load)?;
            let (points, paint) = paint_stage(&data, &config.painter)?;
            let passthrough = RefinerConfig {
                enabled: false,
                ..config.refiner
            };
            let (_, augmented) = refine_stage(&points, &paint.priors, &data.labels, &passthrough)?;
            let dir = &config.io.output_dir;
            write_json(&dir.join("raw_priors.json"), &paint.priors).stage(Stage::Write)?;
            write_augmented(&augmented, &dir.join("painted.bin")).stage(Stage::Write)?;
            println!("{} priors, {} of {} points painted", paint.priors.len(), paint.painted_count(), points.len());
        }
        Command::Refine { scene, priors, out } => {
            let mut o = Vec::new();
            push(&mut o, "io.scene_dir", path_value(&scene));
            push(&mut o, "io.output_dir", path_value(&out));
            let config = load_config(&cli.common, o)?;
            let data = read_scene(&config.io.scene_dir).stage(Stage::Load)?;
            let raw: Vec<Instance3DPrior> = read_json(&priors).stage(Stage::Load)?;
            let points = stack_sweeps(&data.sweeps, data.keyframe, &data.rig).stage(Stage::Stack)?;
            let (refine, augmented) = refine_stage(&points, &raw, &data.labels, &config.refiner)?;
            let dir = &config.io.output_dir;
            write_json(&dir.join(PRIORS_FILE), &refine.priors).stage(Stage::Write)?;
            write_augmented(&augmented, &dir.join("augmented.bin")).stage(Stage::Write)?;
            println!("{} priors kept, {} points evicted", refine.priors.len(), refine.evicted);
        }
        Command::Fuse { input, out } => {
            let config = load_config(&cli.common, Vec::new())?;
            let cloud = read_augmented(&input).stage(Stage::Load)?;
            let labels = instpaint::scene::LabelTable::nuscenes();
            let fused = fuse_stage(&cloud, labels.len(), &config.fusion)?;
            let bytes: Vec<u8> = fused.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            write_atomic(&out, &bytes).stage(Stage::Write)?;
            let pillars = instpaint::fusion::pillarize(&cloud, &config.fusion.grid);
            let summary = serde_json::json!({
                "points": cloud.len(),
                "dim": fused.dim,
                "grid": config.fusion.grid.dims(),
                "occupied_cells": pillars.len(),
            });
            write_json(&out.with_extension("json"), &summary).stage(Stage::Write)?;
            println!("{} points x {} features", cloud.len(), fused.dim);
        }
        Command::AugmentFp(FpCommand::Build {
            scene,
            detections,
            db,
            iou_threshold,
        }) => {
            let mut o = Vec::new();
            push(&mut o, "io.scene_dir", path_value(&scene));
            push(&mut o, "io.fp_database", path_value(&db));
            push(&mut o, "fpa.iou_threshold", iou_threshold.map(|v| format!("{v:?}")));
            let config = load_config(&cli.common, o)?;
            let dir = &config.io.scene_dir;
            let data = read_scene(dir).stage(Stage::Load)?;
            let gt = read_ground_truth(dir).stage(Stage::Load)?;
            let dets: Vec<Box3D> = read_json(&detections).stage(Stage::Load)?;
            let points = stack_sweeps(&data.sweeps, data.keyframe, &data.rig).stage(Stage::Stack)?;
            let mined = mine_false_positives(&dets, &gt.boxes, config.fpa.iou_threshold).stage(Stage::Augment)?;
            let mut db = if config.io.fp_database.join("index.json").exists() {
                FpDatabase::load(&config.io.fp_database).stage(Stage::Load)?
            } else {
                FpDatabase::default()
            };
            let scene_id = dir.display().to_string();
            for b in &mined {
                db.push(FpRecord::crop(&points, b, scene_id.clone())).stage(Stage::Augment)?;
            }
            db.save(&config.io.fp_database).stage(Stage::Write)?;
            println!("mined {} of {} detections; database holds {}", mined.len(), dets.len(), db.records.len());
        }
        Command::AugmentFp(FpCommand::Paste {
            input,
            db,
            scene,
            count,
            out,
        }) => {
            let mut o = Vec::new();
            push(&mut o, "io.fp_database", path_value(&db));
            push(&mut o, "fpa.count", count.map(|v| v.to_string()));
            let config = load_config(&cli.common, o)?;
            let cloud = read_augmented(&input).stage(Stage::Load)?;
            let db = FpDatabase::load(&config.io.fp_database).stage(Stage::Load)?;
            let boxes = match &scene {
                Some(dir) => read_ground_truth(dir).stage(Stage::Load)?.boxes,
                None => Vec::new(),
            };
            let r = paste_samples(&cloud, &db, config.fpa.count, &boxes, config.seed, config.fpa.random_translation);
            write_augmented(&r.cloud, &out).stage(Stage::Write)?;
            println!("pasted {} of {} requested samples", r.pasted.len(), r.requested);
        }
        Command::Eval { scene, input, priors } => {
            let mut o = Vec::new();
            push(&mut o, "io.scene_dir", path_value(&scene));
            let config = load_config(&cli.common, o)?;
            let cloud = read_augmented(&input).stage(Stage::Load)?;
            let gt = read_ground_truth(&config.io.scene_dir).stage(Stage::Load)?;
            let priors: Vec<Instance3DPrior> = match &priors {
                Some(p) => read_json(p).stage(Stage::Load)?,
                None => Vec::new(),
            };
            let m = evaluate(&cloud, &priors, 0, &gt).stage(Stage::Eval)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Pipeline { scene, out, no_refine } => {
            let mut o = Vec::new();
            push(&mut o, "io.scene_dir", path_value(&scene));
            push(&mut o, "io.output_dir", path_value(&out));
            if no_refine {
                o.push("refiner.enabled=false".into());
            }
            let config = load_config(&cli.common, o)?;
            let report = run_pipeline(&config)?;
            match &report.metrics {
                Some(m) => println!("{}", serde_json::to_string_pretty(m)?),
                None => println!("wrote {}", report.augmented_path.display()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use romnisweep::config::RunConfig;
use romnisweep::fusion::FusionMode;
use romnisweep::io::colormap::{render_depth_map, render_error_map, save_rgb};
use romnisweep::io::pfm::{read_pfm, write_pfm, FloatMap};
use romnisweep::io::ply::{export_pointcloud, write_ply, DEFAULT_INDEX_FLOOR};
use romnisweep::model::{Geometry, Model};
use romnisweep::selftest;
use romnisweep::synth::{make_dataset, Dataset, DatasetSpec, Preset, Split};
use romnisweep::train::trainer::dataset_geometry;
use romnisweep::train::{check_compatible, evaluate, load_checkpoint, predict, train, TrainOptions};

/// Grid cache directory.
const CACHE_ENV: &str = "ROMNISWEEP_CACHE";

#[derive(Parser)]
#[command(
    name = "romnisweep",
    version,
    about = "Omnidirectional depth from four fisheye cameras"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Recurrent iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    #[arg(long, value_enum)]
    grid_embedding: Option<Switch>,
    #[arg(long, value_enum)]
    adaptive_context: Option<Switch>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural train/test dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory (overrides data.dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
    },
    /// Train from scratch (or resume) and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Dataset directory (overrides data.dir).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Run directory for checkpoint and log.
        #[arg(long, value_name = "DIR", default_value = "runs/latest")]
        out: PathBuf,
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Pause after this many total steps; continue later with --resume.
        #[arg(long, value_name = "STEP")]
        stop_at: Option<usize>,
    },
    /// Metrics of a checkpoint on a dataset split, as JSON.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the JSON here instead of standard output.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Depth panorama and per-iteration error maps for one scene.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Scene id from the dataset manifest.
        #[arg(long)]
        scene: usize,
        #[arg(long, value_name = "DIR", default_value = "infer")]
        out: PathBuf,
    },
    /// Point cloud (PLY) from a depth panorama.
    ExportCloud {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Index map written by `infer`.
        #[arg(long, value_name = "PFM")]
        depth: PathBuf,
        /// Take the sweep configuration from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Optional panorama with per-pixel colors.
        #[arg(long, value_name = "PNG")]
        rgb: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_INDEX_FLOOR)]
        index_floor: f64,
        #[arg(long)]
        ascii: bool,
        #[arg(long, value_name = "FILE", default_value = "cloud.ply")]
        out: PathBuf,
    },
    /// Run the offline oracle and invariant checks.
    SelfTest,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    let s = match s {
        "adaptive_opposite" => "adaptive",
        "all_weighting" => "all",
        s => s,
    };
    s.parse().map_err(|e: romnisweep::Error| e.to_string())
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: romnisweep::Error| e.to_string())
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// `base`, replaced by `--config` when given, then `--set`.
fn resolve(base: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => base,
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

fn apply_model_args(cfg: &mut RunConfig, m: &ModelArgs) -> Result<()> {
    let on = |s: Switch| matches!(s, Switch::On);
    if let Some(i) = m.iters {
        cfg.model.iterations = i;
    }
    if let Some(f) = m.fusion {
        cfg.model.fusion = f;
    }
    if let Some(s) = m.grid_embedding {
        cfg.model.grid_embedding = on(s);
    }
    if let Some(s) = m.adaptive_context {
        cfg.model.adaptive_context = on(s);
    }
    cfg.validate()?;
    Ok(())
}

/// Checkpoint model with the run configuration layered on its own.
fn restore(
    checkpoint: &Path,
    args: &ConfigArgs,
    model_args: &ModelArgs,
    data: Option<&Path>,
) -> Result<(RunConfig, Model, Dataset, Geometry)> {
    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut cfg = resolve(ck.config.clone(), args)?;
    apply_model_args(&mut cfg, model_args)?;
    if let Some(d) = data {
        cfg.data.dir = d.to_path_buf();
    }
    check_compatible(&ck.config.model, &cfg.model)?;
    let mut model = ck.model;
    model.config = cfg.model.clone();
    let dataset = Dataset::open(&cfg.data.dir)?;
    let geometry = dataset_geometry(&cfg, &dataset, cache_dir().as_deref())?;
    Ok((cfg, model, dataset, geometry))
}

fn write_json(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            cfg: args,
            out,
            train,
            test,
            preset,
        } => {
            let mut cfg = resolve(RunConfig::default(), &args)?;
            if let Some(s) = args.seed {
                cfg.data.seed = s;
            }
            let d = &mut cfg.data;
            d.dir = out.unwrap_or(d.dir.clone());
            d.train_scenes = train.unwrap_or(d.train_scenes);
            d.test_scenes = test.unwrap_or(d.test_scenes);
            d.preset = preset.unwrap_or(d.preset);
            let spec = DatasetSpec {
                train: d.train_scenes,
                test: d.test_scenes,
                preset: d.preset,
                seed: d.seed,
            };
            let rig = cfg.build_rig()?;
            let manifest = make_dataset(&spec, &rig, &cfg.sweep, &cfg.data.dir)?;
            println!("wrote {} scenes to {}", manifest.scenes.len(), cfg.data.dir.display());
        }
        Command::Train {
            cfg: args,
            model,
            data,
            out,
            resume,
            stop_at,
        } => {
            let mut cfg = resolve(RunConfig::default(), &args)?;
            if let Some(s) = args.seed {
                cfg.train.seed = s;
            }
            apply_model_args(&mut cfg, &model)?;
            if let Some(d) = data {
                cfg.data.dir = d;
            }
            fs::create_dir_all(&out)?;
            cfg.save(&out.join("config.json"))?;
            let report = train(
                &cfg,
                &TrainOptions {
                    out_dir: out,
                    cache_dir: cache_dir(),
                    resume,
                    stop_at,
                },
            )?;
            if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
                println!("loss {first:.4} -> {last:.4}");
            }
            println!("checkpoint: {}", report.checkpoint.display());
        }
        Command::Eval {
            cfg: args,
            model: model_args,
            checkpoint,
            data,
            split,
            out,
        } => {
            let (cfg, model, dataset, geometry) = restore(&checkpoint, &args, &model_args, data.as_deref())?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let samples = dataset.load_split(split)?;
            let report = evaluate(&model, &geometry, &samples, cfg.model.iterations)?;
            let a = &report.aggregate;
            eprintln!(
                "{} scenes: mae {:.4} rms {:.4} >1 {:.2}% >3 {:.2}% >5 {:.2}%",
                report.scenes.len(),
                a.mae,
                a.rms,
                a.gt1,
                a.gt3,
                a.gt5
            );
            write_json(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Infer {
            cfg: args,
            model: model_args,
            checkpoint,
            data,
            scene,
            out,
        } => {
            let (cfg, model, dataset, geometry) = restore(&checkpoint, &args, &model_args, data.as_deref())?;
            let sample = dataset.load(dataset.entry(scene)?)?;
            let history = predict(&model, &geometry, &sample, cfg.model.iterations)?;
            let (w, h) = (sample.width, sample.height);
            let top = (geometry.sweep.num_spheres - 1) as f64;
            fs::create_dir_all(&out)?;
            let last = history.last().expect("at least one iteration");
            write_pfm(&out.join("depth.pfm"), &FloatMap::from_f64(w, h, last))?;
            save_rgb(&out.join("depth.png"), &render_depth_map(last, top, w, h))?;
            save_rgb(&out.join("gt.png"), &render_depth_map(&sample.gt, top, w, h))?;
            for (i, pred) in history.iter().enumerate() {
                let img = render_error_map(pred, &sample.gt, &sample.mask, w, h)?;
                save_rgb(&out.join(format!("err_iter{}.png", i + 1)), &img)?;
            }
            println!("wrote {} iterations to {}", history.len(), out.display());
        }
        Command::ExportCloud {
            cfg: args,
            depth,
            checkpoint,
            rgb,
            index_floor,
            ascii,
            out,
        } => {
            let base = match &checkpoint {
                Some(p) => load_checkpoint(p)?.config,
                None => RunConfig::default(),
            };
            let cfg = resolve(base, &args)?;
            let map = read_pfm(&depth)?;
            if (map.width, map.height) != (cfg.sweep.out_width, cfg.sweep.out_height) {
                bail!(
                    "{} is {}x{} but the sweep output is {}x{}",
                    depth.display(),
                    map.width,
                    map.height,
                    cfg.sweep.out_width,
                    cfg.sweep.out_height
                );
            }
            let colors = match &rgb {
                Some(p) => Some(
                    image::open(p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .to_rgb8()
                        .pixels()
                        .map(|px| px.0)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let cloud = export_pointcloud(&map.to_f64(), None, &cfg.sweep, colors.as_deref(), index_floor)?;
            write_ply(&out, &cloud, ascii)?;
            println!("wrote {} points to {}", cloud.len(), out.display());
        }
        Command::SelfTest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{}", c.line());
            }
            if !checks.iter().all(|c| c.passed) {
                bail!("self-test failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Matrix4;

use gsslam::ablation::{self, AblationRow, AblationSetup, DepthNoise};
use gsslam::config::{RunConfig, RunMode};
use gsslam::dataset::{load_dataset, save_synthetic, write_rgb, TUM_DEPTH_SCALE};
use gsslam::geometry::SE3Pose;
use gsslam::output::{format_metrics, load_run, save_run, Checkpoint};
use gsslam::pipeline::{evaluate, run, EvalReport};
use gsslam::scene::{generate_scene, SceneSpec};
use gsslam::splat::rasterize;

#[derive(Parser)]
#[command(
    name = "gsslam",
    version,
    about = "Dense bundle-adjustment tracking with Gaussian splat mapping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Interleaved,
    Concurrent,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Decay,
    Depthloss,
    Postproc,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a sequence, then evaluate and write the run directory.
    Run {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// TOML run configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluate a finished run directory against its dataset.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Dataset to evaluate against instead of the one recorded in the run.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Mapping-only ablations on a sequence with ground-truth poses and depth.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
        #[arg(long)]
        dataset: PathBuf,
        /// TOML ablation setup (keyframe_stride, eval_stride, seed,
        /// depth_variance and a [mapping] table).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a checkpoint from a keyframe or an explicit camera-to-world pose.
    Render {
        /// Run or checkpoint directory holding checkpoint.json and map.igs.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Keyframe frame index, or 12 or 16 comma-separated row-major
        /// camera-to-world matrix entries.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic sequence with ground truth in the manifest format.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// TOML scene description; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            dataset,
            config,
            mode,
            seed,
            out,
        } => cmd_run(dataset, config, mode, seed, &out),
        Command::Eval { run, dataset } => cmd_eval(&run, dataset),
        Command::Ablate {
            which,
            dataset,
            config,
        } => cmd_ablate(which, &dataset, config),
        Command::Render {
            checkpoint,
            pose,
            out,
        } => cmd_render(&checkpoint, &pose, &out),
        Command::Generate { out, spec, seed } => cmd_generate(&out, spec, seed),
    }
}

fn cmd_run(
    dataset: Option<PathBuf>,
    config: Option<PathBuf>,
    mode: Option<Mode>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = match &config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = dataset {
        cfg.dataset = Some(d);
    }
    if let Some(m) = mode {
        cfg.mode = match m {
            Mode::Interleaved => RunMode::Interleaved,
            Mode::Concurrent => RunMode::Concurrent,
        };
    }
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let dir = cfg
        .dataset
        .clone()
        .ok_or_else(|| anyhow!("no dataset given on the command line or in the configuration"))?;
    let data = load_dataset(&dir, cfg.dataset_format)
        .with_context(|| format!("loading {}", dir.display()))?;
    log::info!("{} frames from {}", data.frames.len(), dir.display());
    let output = run(&cfg, &data)?;
    save_run(out, &cfg, &data.camera, &output)?;
    print_summary(&output.report);
    log::info!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(run_dir: &Path, dataset: Option<PathBuf>) -> Result<()> {
    let saved = load_run(run_dir)?;
    let dir = dataset
        .or_else(|| saved.config.dataset.clone())
        .ok_or_else(|| anyhow!("the run records no dataset; pass --dataset"))?;
    let mut data = load_dataset(&dir, saved.config.dataset_format)?;
    if let Some(n) = saved.config.clip_frames {
        data.clip(n);
    }
    let report = evaluate(
        &saved.checkpoint.gaussians,
        &saved.checkpoint.trajectory(),
        &data,
        saved.config.eval_stride_frames,
    )?;
    print!("{}", format_metrics(&report));
    print_summary(&report);
    Ok(())
}

fn cmd_ablate(which: Ablation, dataset: &Path, config: Option<PathBuf>) -> Result<()> {
    let setup: AblationSetup = match config {
        Some(p) => {
            let text =
                std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => AblationSetup::default(),
    };
    let data = load_dataset(dataset, None)?;
    let rows = match which {
        Ablation::Decay => ablation::decay_ablation(&data, &setup, &DepthNoise::default())?,
        Ablation::Depthloss => {
            ablation::depth_loss_ablation(&data, &setup, &DepthNoise::default())?
        }
        Ablation::Postproc => ablation::postproc_ablation(&data, &setup, &[0, 500, 2000])?,
    };
    print_rows(&rows);
    Ok(())
}

fn print_rows(rows: &[AblationRow]) {
    println!(
        "{:<28} {:>8} {:>7} {:>10} {:>9} {:>7}",
        "variant", "psnr", "ssim", "depth_l1", "gaussians", "iters"
    );
    for r in rows {
        let d = r
            .depth_l1
            .map_or_else(|| "-".to_string(), |d| format!("{d:.5}"));
        println!(
            "{:<28} {:>8.3} {:>7.4} {:>10} {:>9} {:>7}",
            r.label, r.psnr, r.ssim, d, r.gaussians, r.iterations
        );
    }
}

fn parse_pose(arg: &str, checkpoint: &Checkpoint) -> Result<SE3Pose> {
    if let Ok(frame) = arg.trim().parse::<usize>() {
        return checkpoint
            .meta
            .keyframes
            .iter()
            .find(|k| k.frame == frame)
            .map(|k| k.pose.pose())
            .ok_or_else(|| anyhow!("no keyframe with frame index {frame} in the checkpoint"));
    }
    let values: Vec<f64> = arg
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad matrix entry {v:?}"))
        })
        .collect::<Result<_>>()?;
    let mut m = Matrix4::identity();
    match values.len() {
        12 | 16 => {
            for (i, v) in values.iter().take(12).enumerate() {
                m[(i / 4, i % 4)] = *v;
            }
        }
        n => bail!("a pose matrix needs 12 or 16 entries, got {n}"),
    }
    Ok(SE3Pose::from_matrix(&m))
}

fn cmd_render(checkpoint: &Path, pose: &str, out: &Path) -> Result<()> {
    let cp = Checkpoint::load(checkpoint)?;
    let pose = parse_pose(pose, &cp)?;
    let camera = cp.meta.camera.camera()?;
    let frame = rasterize(&cp.gaussians, &pose, &camera);
    write_rgb(out, &frame.color)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

fn cmd_generate(out: &Path, spec: Option<PathBuf>, seed: u64) -> Result<()> {
    let spec: SceneSpec = match spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneSpec::default(),
    };
    let scene = generate_scene(&spec, seed)?;
    save_synthetic(out, &scene.dataset, TUM_DEPTH_SCALE)?;
    log::info!(
        "wrote {} frames to {}",
        scene.dataset.frames.len(),
        out.display()
    );
    Ok(())
}

fn print_summary(report: &EvalReport) {
    let depth = report
        .mean_depth_l1
        .map_or_else(|| "-".to_string(), |d| format!("{d:.5}"));
    println!(
        "keyframes {}  eval frames {}  psnr {:.3} dB  ssim {:.4}  depth_l1 {}  ate_rmse {:.3e}",
        report.keyframes,
        report.frames.len(),
        report.mean_psnr,
        report.mean_ssim,
        depth,
        report.ate_rmse
    );
}

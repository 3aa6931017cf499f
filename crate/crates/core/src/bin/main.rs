//! Command-line front end: dataset generation, training, rendering,
//! reconstruction and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use monorecon::checkpoint;
use monorecon::config::{parse_pose_spec, AppConfig};
use monorecon::encoder::encode;
use monorecon::error::Error;
use monorecon::geometry::SE3Pose;
use monorecon::losses::{self, LossLogRow, ModelState, Sequence};
use monorecon::metrics;
use monorecon::recon::{
    self, novel_pose_schedule, occupancy_from_tsdf, FuseMode,
};
use monorecon::scenegen::{self, Manifest, SequenceSpec};

#[derive(Parser)]
#[command(name = "monorecon", version, about = "Single-image scene reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread count (default: all cores). Results are identical for
    /// any value.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training sequence with ground-truth depth.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model on a generated sequence.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Render RGB and depth from a trained model at a relative pose.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Relative pose: forward meters and yaw degrees, e.g. '+1.5m,-10deg'.
        #[arg(long, default_value = "0m,0deg")]
        pose: String,
    },
    /// Reconstruct a fused distance volume, occupancy grid and mesh.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Depth and image metrics against the dataset's analytic ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Extra evaluation poses, e.g. '+2m,+10deg' (repeatable).
        #[arg(long)]
        pose: Vec<String>,
    },
}

fn load_config(common: &Common) -> Result<AppConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(common: &Common) -> Result<(), Error> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_gen_data(common: &Common, frames: Option<usize>) -> Result<(), Error> {
    let mut cfg = load_config(common)?;
    if let Some(f) = frames {
        cfg.frames = f;
    }
    cfg.validate()?;
    let scene = scenegen::default_scene(cfg.seed);
    let spec = SequenceSpec {
        camera: cfg.intrinsics(),
        trajectory: scenegen::default_trajectory(cfg.frames, cfg.frame_step, cfg.seed),
    };
    ensure_dir(&common.out)?;
    scenegen::generate_sequence(&scene, &spec, cfg.seed, &common.out)?;
    println!(
        "wrote {} frames to {}",
        cfg.frames,
        common.out.display()
    );
    Ok(())
}

fn write_loss_log(path: &Path, rows: &[LossLogRow]) -> Result<(), Error> {
    let mut text = String::from("epoch,step,l_rgb,l_reproj,l_gauss,l_surface,l_total,lr\n");
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_train(
    common: &Common,
    data: &Path,
    resume: Option<&Path>,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<(), Error> {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(l) = lr {
        cfg.lr = l;
    }
    cfg.validate()?;
    let seq = Sequence::load(data)?;
    let tcfg = cfg.train_config();
    let mut state = match resume {
        Some(path) => {
            let (state, saved_cfg) = checkpoint::load(path)?;
            let mut expect = tcfg.clone();
            expect.epochs = saved_cfg.epochs;
            if saved_cfg != expect {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different configuration",
                    path.display()
                )));
            }
            state
        }
        None => ModelState::init(&tcfg),
    };
    ensure_dir(&common.out)?;
    let out = common.out.clone();
    let ck_cfg = tcfg.clone();
    let mut on_epoch = move |s: &ModelState| {
        checkpoint::save(&out.join(format!("epoch_{:04}.ckpt", s.epoch)), s, &ck_cfg)
    };
    let log = losses::train(&mut state, &seq, &tcfg, Some(&mut on_epoch))?;
    checkpoint::save(&common.out.join("final.ckpt"), &state, &tcfg)?;
    write_loss_log(&common.out.join("loss_log.csv"), &log)?;
    if let Some(last) = log.last() {
        println!(
            "trained to epoch {}: total loss {:.6}",
            state.epoch, last.losses.l_total
        );
    } else {
        println!("nothing to train (epoch {} already reached)", state.epoch);
    }
    Ok(())
}

struct LoadedModel {
    state: ModelState,
    seq: Sequence,
    manifest: Manifest,
    grid: monorecon::encoder::FeatureGrid,
    rcfg: monorecon::render::RenderConfig,
    seed: u64,
}

fn load_model(ck: &Path, data: &Path) -> Result<LoadedModel, Error> {
    let (state, tcfg) = checkpoint::load(ck)?;
    let seq = Sequence::load(data)?;
    let manifest = Manifest::load(data)?;
    let encoder_params = &state.encoder;
    let grid = encode(encoder_params, &seq.images[0], &seq.intrinsics)?;
    Ok(LoadedModel {
        rcfg: tcfg.render_config(),
        seed: tcfg.seed,
        state,
        seq,
        manifest,
        grid,
    })
}

fn relative_pose(base: &SE3Pose, fwd_m: f64, yaw_deg: f64) -> SE3Pose {
    let local = SE3Pose::new(
        SE3Pose::yaw(yaw_deg.to_radians()),
        Vector3::new(0.0, 0.0, fwd_m),
    );
    base.compose(&local)
}

fn cmd_render(common: &Common, ck: &Path, data: &Path, pose: &str) -> Result<(), Error> {
    let _ = load_config(common)?;
    let (fwd_m, yaw_deg) = parse_pose_spec(pose)?;
    let model = load_model(ck, data)?;
    let pose = relative_pose(&model.seq.poses[0], fwd_m, yaw_deg);
    ensure_dir(&common.out)?;
    let k = &model.seq.intrinsics;
    let img = recon::render_image(&model.state, &model.grid, &pose, k, &model.rcfg, model.seed)?;
    let depth =
        recon::render_depth_map(&model.state, &model.grid, &pose, k, &model.rcfg, model.seed)?;
    img.save_png(&common.out.join("rgb.png"))?;
    depth.save_png_mm(&common.out.join("depth.png"))?;
    depth.save_bin(&common.out.join("depth.bin"))?;
    println!("rendered {} to {}", k.width * k.height, common.out.display());
    Ok(())
}

fn cmd_reconstruct(common: &Common, ck: &Path, data: &Path) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let model = load_model(ck, data)?;
    let yaws: Vec<f64> = cfg.yaws_deg.iter().map(|d| d.to_radians()).collect();
    let poses = novel_pose_schedule(
        &model.seq.poses[0],
        cfg.rho,
        cfg.max_dist,
        &yaws,
        cfg.include_origin,
    )?;
    let mode = if cfg.fuse_average {
        FuseMode::Average
    } else {
        FuseMode::MinAbs
    };
    let volume = recon::reconstruct(
        &model.state,
        &model.grid,
        &model.seq.intrinsics,
        &model.rcfg,
        &poses,
        &cfg.volume_config(),
        mode,
        model.seed,
    )?;
    ensure_dir(&common.out)?;
    volume.save(&common.out.join("volume"))?;
    let occ = occupancy_from_tsdf(&volume, &cfg.occupancy_config());
    occ.save(&common.out.join("occupancy"))?;
    let mesh = recon::marching_cubes(&volume, 0.0);
    mesh.save_ply(&common.out.join("mesh.ply"))?;
    println!(
        "fused {} poses: {} occupied voxels, mesh with {} triangles",
        poses.len(),
        occ.data.iter().filter(|b| **b).count(),
        mesh.triangles.len()
    );
    Ok(())
}

fn cmd_eval(common: &Common, ck: &Path, data: &Path, pose_specs: &[String]) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let model = load_model(ck, data)?;
    let k = &model.seq.intrinsics;
    let scene = &model.manifest.scene;

    // dataset frame poses plus any requested novel poses
    let mut poses: Vec<(String, SE3Pose)> = model
        .seq
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("frame{i:04}"), *p))
        .collect();
    for spec in pose_specs {
        let (fwd_m, yaw_deg) = parse_pose_spec(spec)?;
        poses.push((
            spec.clone(),
            relative_pose(&model.seq.poses[0], fwd_m, yaw_deg),
        ));
    }

    let mut rows = Vec::new();
    for (name, pose) in &poses {
        let (gt_rgb, gt_depth) = scene.render_gt(k, pose);
        let depth =
            recon::render_depth_map(&model.state, &model.grid, pose, k, &model.rcfg, model.seed)?;
        let rgb =
            recon::render_image(&model.state, &model.grid, pose, k, &model.rcfg, model.seed)?;
        let dm = metrics::depth_metrics(&depth, &gt_depth, cfg.depth_cap)?;
        let psnr = metrics::psnr(metrics::image_mse(&rgb, &gt_rgb)?, 1.0);
        let ssim = metrics::ssim(&rgb, &gt_rgb)?;
        rows.push((name.clone(), dm, psnr, ssim));
    }

    ensure_dir(&common.out)?;
    let mut csv = String::from(
        "pose,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,psnr,ssim\n",
    );
    for (name, dm, psnr, ssim) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{psnr},{ssim}\n",
            dm.abs_rel, dm.sq_rel, dm.rmse, dm.rmse_log, dm.delta1, dm.delta2, dm.delta3
        ));
    }
    let csv_path = common.out.join("metrics.csv");
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;

    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|(name, dm, psnr, ssim)| {
            serde_json::json!({
                "pose": name,
                "depth": dm,
                "psnr": psnr,
                "ssim": ssim,
            })
        })
        .collect();
    let json_path = common.out.join("metrics.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&json).expect("metrics serialize"),
    )
    .map_err(|e| Error::io(&json_path, e))?;

    for (name, dm, psnr, ssim) in &rows {
        println!(
            "{name}: abs_rel {:.4} delta1 {:.1} psnr {:.2} ssim {:.4}",
            dm.abs_rel, dm.delta1, psnr, ssim
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData { common, frames } => {
            init_threads(common)?;
            cmd_gen_data(common, *frames)
        }
        Command::Train {
            common,
            data,
            resume,
            epochs,
            lr,
        } => {
            init_threads(common)?;
            cmd_train(common, data, resume.as_deref(), *epochs, *lr)
        }
        Command::Render {
            common,
            checkpoint,
            data,
            pose,
        } => {
            init_threads(common)?;
            cmd_render(common, checkpoint, data, pose)
        }
        Command::Reconstruct {
            common,
            checkpoint,
            data,
        } => {
            init_threads(common)?;
            cmd_reconstruct(common, checkpoint, data)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            pose,
        } => {
            init_threads(common)?;
            cmd_eval(common, checkpoint, data, pose)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

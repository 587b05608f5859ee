use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use raio::config::RunConfig;
use raio::error::{Error, Result};
use raio::evaluation::{self, EvalReport};
use raio::params::load_checkpoint;
use raio::pipeline::{self, Model, OdometryMode};
use raio::simulator::{self, read_sequence, write_sequence, Sequence};

#[derive(Parser)]
#[command(
    name = "raio",
    version,
    about = "Self-supervised radar-inertial odometry on range-azimuth spectra",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic radar-inertial sequence directory
    Simulate {
        /// JSON run configuration (defaults apply when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output sequence directory
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the landmark extractor and bias regressor without pose labels
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sequence directories (comma-separated or repeated)
        #[arg(long, required = true, value_delimiter = ',')]
        data: Vec<PathBuf>,
        /// Output directory for checkpoint.{json,bin} and loss.csv
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in the output directory
        #[arg(long)]
        resume: bool,
        /// Override the configured epoch count
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run odometry over a sequence, writing traj.csv and map.csv
    Odometry {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input sequence directory
        #[arg(long)]
        seq: PathBuf,
        /// Checkpoint directory (not needed for --mode imu_only)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// imu_only | s3e | s3e_kabsch
        #[arg(long, default_value = "s3e")]
        mode: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate an estimated trajectory (and optionally a map)
    Eval {
        /// Estimated trajectory CSV (t,x,y,yaw)
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth trajectory CSV (t,x,y,yaw)
        #[arg(long)]
        gt: PathBuf,
        /// Estimated map CSV (x,y); requires --gt-map
        #[arg(long)]
        map: Option<PathBuf>,
        /// Ground-truth map CSV (x,y)
        #[arg(long = "gt-map")]
        gt_map: Option<PathBuf>,
        /// Report output path (JSON; a CSV sibling is written next to it)
        #[arg(long)]
        out: PathBuf,
        /// Optional SVG error-versus-length plot
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Use the long-range (100-800 m) segment lengths
        #[arg(long)]
        kitti_lengths: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_simulate(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.trajectory.seed = s;
    }
    cfg.validate()?;
    let scene = cfg.scene.build(cfg.seed);
    let seq = simulator::simulate_sequence(
        &scene,
        &cfg.trajectory,
        &cfg.radar,
        &cfg.extrinsics,
        cfg.radar_rate,
        cfg.imu_rate,
        &cfg.imu_noise,
        &cfg.imu_bias,
    )?;
    write_sequence(&seq, &out)?;
    println!(
        "wrote {} frames over {:.1} s, {} static landmarks, {} dynamic objects -> {}",
        seq.frames.len(),
        seq.gt_poses.last().map(|p| p.t).unwrap_or(0.0),
        scene.landmarks.len(),
        scene.dynamics.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    data: Vec<PathBuf>,
    out: PathBuf,
    resume: bool,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut tc = cfg.train_config();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let mut sequences: Vec<Sequence> = Vec::new();
    for dir in &data {
        sequences.push(read_sequence(dir)?);
    }
    let ckpt = if resume {
        Some(load_checkpoint(&out)?)
    } else {
        None
    };
    let result = pipeline::train(&sequences, &tc, ckpt.as_ref())?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    result
        .model
        .save(&out, Some(&result.adam), Some(&result.meta))?;
    let loss_path = out.join("loss.csv");
    let mut csv = if resume && loss_path.exists() {
        std::fs::read_to_string(&loss_path)
            .map_err(|e| Error::io(loss_path.display().to_string(), e))?
    } else {
        String::from("epoch,l1,l2,l3,total\n")
    };
    for row in &result.log {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.l1, row.l2, row.l3, row.total
        ));
    }
    std::fs::write(&loss_path, csv).map_err(|e| Error::io(loss_path.display().to_string(), e))?;
    if let Some(last) = result.log.last() {
        println!(
            "trained to epoch {} (mean total loss {:.6}) -> {}",
            last.epoch + 1,
            last.total,
            out.display()
        );
    } else {
        println!("nothing to train (epochs already completed)");
    }
    Ok(())
}

fn cmd_odometry(
    config: Option<PathBuf>,
    seq_dir: PathBuf,
    checkpoint: Option<PathBuf>,
    mode: String,
    out: PathBuf,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mode: OdometryMode = mode.parse()?;
    let seq = read_sequence(&seq_dir)?;
    let model = match (mode, &checkpoint) {
        (OdometryMode::ImuOnly, _) => None,
        (_, Some(dir)) => Some(Model::load(dir, &cfg.extractor)?.0),
        (_, None) => {
            return Err(Error::config(
                "checkpoint",
                format!("mode {mode:?} requires --checkpoint"),
            ))
        }
    };
    let traj = pipeline::run_odometry(&seq, model.as_ref(), mode, &cfg.odometry_config())?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
    pipeline::write_trajectory(&traj, &out.join("traj.csv"))?;
    let map = pipeline::build_map(&traj, &seq.extrinsics, cfg.eval.map_voxel);
    pipeline::write_map(&map, &out.join("map.csv"))?;
    println!(
        "odometry over {} frames ({} fallback) -> {} map points -> {}",
        traj.poses.len(),
        traj.fallback_frames.len(),
        map.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<PathBuf>,
    est: PathBuf,
    gt: PathBuf,
    map: Option<PathBuf>,
    gt_map: Option<PathBuf>,
    out: PathBuf,
    plot: Option<PathBuf>,
    kitti_lengths: bool,
) -> Result<()> {
    let cfg = load_config(&config)?;
    let est_traj = pipeline::read_trajectory(&est)?;
    let gt_traj = pipeline::read_trajectory(&gt)?;
    let lengths: Vec<f64> = if kitti_lengths {
        evaluation::KITTI_SEGMENT_LENGTHS.to_vec()
    } else {
        cfg.eval.segment_lengths.clone()
    };
    let odometry = evaluation::relative_errors(&est_traj, &gt_traj, &lengths)?;
    let map_report = match (&map, &gt_map) {
        (Some(m), Some(g)) => {
            let est_map = pipeline::read_map(m)?;
            let gt_points = pipeline::read_map(g)?;
            Some(evaluation::map_quality(
                &est_map,
                &gt_points,
                cfg.eval.clutter_threshold,
            )?)
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::config(
                "map",
                "map evaluation needs both --map and --gt-map",
            ))
        }
        (None, None) => None,
    };
    let report = EvalReport {
        odometry,
        map: map_report,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Numeric(format!("report serialization: {e}")))?;
    std::fs::write(&out, json).map_err(|e| Error::io(out.display().to_string(), e))?;
    let csv_path = out.with_extension("csv");
    std::fs::write(&csv_path, evaluation::report_csv(&report.odometry))
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    if let Some(p) = plot {
        std::fs::write(&p, evaluation::error_svg(&report.odometry))
            .map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    println!(
        "translation {:.4} %, rotation {:.4} deg/100m over {} segments{} -> {}",
        report.odometry.translation_pct,
        report.odometry.rotation_deg_per_100m,
        report.odometry.segments_evaluated,
        report
            .map
            .as_ref()
            .map(|m| format!(
                ", chamfer {:.3} m, hausdorff {:.3} m, clutter {:.3}, rpcdl {:.3}",
                m.chamfer_m, m.hausdorff_m, m.clutter_ratio, m.rpcdl
            ))
            .unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, out, seed } => cmd_simulate(config, out, seed),
        Cmd::Train {
            config,
            data,
            out,
            resume,
            epochs,
            seed,
        } => cmd_train(config, data, out, resume, epochs, seed),
        Cmd::Odometry {
            config,
            seq,
            checkpoint,
            mode,
            out,
            seed,
        } => cmd_odometry(config, seq, checkpoint, mode, out, seed),
        Cmd::Eval {
            est,
            gt,
            map,
            gt_map,
            out,
            plot,
            kitti_lengths,
            config,
        } => cmd_eval(config, est, gt, map, gt_map, out, plot, kitti_lengths),
    }
}

fn main() -> ExitCode {
    let help = format!(
        "Configuration file keys and their defaults:\n{}",
        RunConfig::default_json()
    );
    let mut cmd = Cli::command();
    for name in ["simulate", "train", "odometry", "eval"] {
        let help = help.clone();
        cmd = cmd.mut_subcommand(name, move |sc| sc.after_help(help));
    }
    let matches = cmd.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line pipeline: `simulate` a radar sequence, `project` it to
//! Cartesian images, `train` the feature network on it, run `odometry`
//! with a trained model, and `evaluate` or `ablate` the results.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::Vector6;

use radar_odom::config::{load_config, RunConfig};
use radar_odom::eval::{
    kitti_drift, load_trajectory, save_trajectory, write_drift_csv, Trajectory, FULL_LENGTHS,
    SCALED_LENGTHS,
};
use radar_odom::features::{load_model, save_model, FeatureModel};
use radar_odom::scan::{project_scan, CartesianImage, PolarScan};
use radar_odom::simworld::{
    generate_trajectory, read_groundtruth_csv, render_sequence, write_groundtruth_csv, World,
};
use radar_odom::trainer::{run_odometry, train};

#[derive(Parser)]
#[command(
    name = "radar-odom",
    version,
    about = "Unsupervised radar odometry: simulate, train, estimate, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated radar sequence and its groundtruth.
    Simulate {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives scans/ and groundtruth.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Project polar scans to Cartesian images (PGM, for inspection).
    Project {
        #[arg(long)]
        config: PathBuf,
        /// Directory of .scan files.
        #[arg(long)]
        scans: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the feature network on a scan sequence.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory of .scan files.
        #[arg(long)]
        scans: PathBuf,
        /// Output directory; receives model.ckpt, train.csv, checkpoints/.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run sliding-window odometry with a trained model.
    Odometry {
        #[arg(long)]
        config: PathBuf,
        /// Directory of .scan files.
        #[arg(long)]
        scans: PathBuf,
        /// Model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output trajectory file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against groundtruth.
    Evaluate {
        /// Estimated trajectory (timestamp + 12 floats per row).
        #[arg(long)]
        est: PathBuf,
        /// Groundtruth: a .csv from `simulate` or a trajectory file.
        #[arg(long)]
        gt: PathBuf,
        /// Evaluation lengths as start:end:step metres (default 100:800:100).
        #[arg(long)]
        lengths: Option<String>,
        /// Optional per-length CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train and evaluate the baseline plus every single-switch ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Directory of .scan files.
        #[arg(long)]
        scans: PathBuf,
        /// Groundtruth CSV for the sequence.
        #[arg(long)]
        gt: PathBuf,
        /// Output directory; one subdirectory per variant.
        #[arg(long)]
        out_dir: PathBuf,
        /// Evaluation lengths as start:end:step metres (default 10:80:10).
        #[arg(long)]
        lengths: Option<String>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::Simulate { config, out_dir } => simulate(&config, &out_dir),
        Command::Project {
            config,
            scans,
            out_dir,
        } => project(&config, &scans, &out_dir),
        Command::Train {
            config,
            scans,
            out_dir,
        } => train_cmd(&config, &scans, &out_dir),
        Command::Odometry {
            config,
            scans,
            model,
            out,
        } => odometry_cmd(&config, &scans, &model, &out),
        Command::Evaluate {
            est,
            gt,
            lengths,
            csv,
        } => evaluate(&est, &gt, lengths.as_deref(), csv.as_deref()),
        Command::Ablate {
            config,
            scans,
            gt,
            out_dir,
            lengths,
        } => ablate(&config, &scans, &gt, &out_dir, lengths.as_deref()),
    }
}

/// Loads every `.scan` file in a directory, ordered by file name.
fn load_scans(dir: &Path) -> Result<Vec<PolarScan>, Box<dyn Error>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "scan"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no .scan files in {}", dir.display()).into());
    }
    paths
        .iter()
        .map(|p| PolarScan::load(p).map_err(Into::into))
        .collect()
}

fn project_all(
    scans: &[PolarScan],
    config: &RunConfig,
) -> Result<Vec<CartesianImage>, Box<dyn Error>> {
    let proj = &config.projection;
    scans
        .iter()
        .map(|s| {
            project_scan(s, proj.beta, proj.image_size, proj.resolution).map_err(Into::into)
        })
        .collect()
}

/// Parses `start:end:step` into inclusive evaluation lengths.
fn parse_lengths(spec: &str) -> Result<Vec<f64>, Box<dyn Error>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("lengths must be start:end:step, got {spec:?}").into());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("lengths must be numeric, got {spec:?}"))?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if !(start > 0.0) || !(step > 0.0) || end < start {
        return Err(format!("lengths need 0 < start <= end and step > 0, got {spec:?}").into());
    }
    let mut lengths = Vec::new();
    let mut l = start;
    while l <= end + 1e-9 {
        lengths.push(l);
        l += step;
    }
    Ok(lengths)
}

/// Groundtruth may be the simulator's CSV or a plain trajectory file.
fn load_reference(path: &Path) -> Result<Trajectory, Box<dyn Error>> {
    if path.extension().is_some_and(|e| e == "csv") {
        let gt = read_groundtruth_csv(path)?;
        Ok(Trajectory::new(gt.timestamps, gt.poses))
    } else {
        Ok(load_trajectory(path)?)
    }
}

fn simulate(config_path: &Path, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    let config = load_config(config_path)?;
    let sim = &config.simulation;
    let world = World::generate(config.seed, sim.landmarks, sim.extent);
    let gt = generate_trajectory(
        config.seed,
        sim.frames,
        sim.dt,
        &Vector6::from_row_slice(&sim.qc_diag),
    );
    let scans = render_sequence(&world, &gt, &config.sensor_params(), config.seed);

    let scan_dir = out_dir.join("scans");
    fs::create_dir_all(&scan_dir)?;
    for (k, scan) in scans.iter().enumerate() {
        scan.save(&scan_dir.join(format!("{k:06}.scan")))?;
    }
    write_groundtruth_csv(&gt, &out_dir.join("groundtruth.csv"))?;
    eprintln!(
        "wrote {} scans of a {}-landmark world to {}",
        scans.len(),
        sim.landmarks,
        out_dir.display()
    );
    Ok(())
}

fn project(config_path: &Path, scans_dir: &Path, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    let config = load_config(config_path)?;
    let scans = load_scans(scans_dir)?;
    let images = project_all(&scans, &config)?;
    fs::create_dir_all(out_dir)?;
    for (k, img) in images.iter().enumerate() {
        img.write_pgm(&out_dir.join(format!("{k:06}.pgm")))?;
    }
    eprintln!(
        "projected {} scans to {}x{} images in {}",
        images.len(),
        config.projection.image_size,
        config.projection.image_size,
        out_dir.display()
    );
    Ok(())
}

fn train_cmd(config_path: &Path, scans_dir: &Path, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    let config = load_config(config_path)?;
    let scans = load_scans(scans_dir)?;
    let images = project_all(&scans, &config)?;
    fs::create_dir_all(out_dir)?;

    let mut model = FeatureModel::new(config.arch(), config.seed)?;
    let outcome = train(
        &mut model,
        &images,
        &config.train_config(),
        Some(&out_dir.join("train.csv")),
        Some(&out_dir.join("checkpoints")),
    )?;
    save_model(&model, &out_dir.join("model.ckpt"))?;
    eprintln!(
        "trained for {} steps ({} windows skipped); model and log in {}",
        outcome.steps,
        outcome.skipped,
        out_dir.display()
    );
    Ok(())
}

fn odometry_cmd(
    config_path: &Path,
    scans_dir: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<(), Box<dyn Error>> {
    let config = load_config(config_path)?;
    let scans = load_scans(scans_dir)?;
    let images = project_all(&scans, &config)?;
    let mut model = load_model(model_path)?;
    let result = run_odometry(&mut model, &images, &config.odometry_config())?;
    save_trajectory(&result.trajectory, out)?;
    let fallbacks = result.fallbacks.iter().filter(|&&f| f).count();
    eprintln!(
        "estimated {} poses ({} dead-reckoned) into {}",
        result.trajectory.len(),
        fallbacks,
        out.display()
    );
    Ok(())
}

fn evaluate(
    est_path: &Path,
    gt_path: &Path,
    lengths: Option<&str>,
    csv: Option<&Path>,
) -> Result<(), Box<dyn Error>> {
    let est = load_trajectory(est_path)?;
    let gt = load_reference(gt_path)?;
    let lengths = match lengths {
        Some(spec) => parse_lengths(spec)?,
        None => FULL_LENGTHS.to_vec(),
    };
    let report = kitti_drift(&est, &gt, &lengths)?;
    if let Some(csv_path) = csv {
        write_drift_csv(&report, csv_path)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn ablate(
    config_path: &Path,
    scans_dir: &Path,
    gt_path: &Path,
    out_dir: &Path,
    lengths: Option<&str>,
) -> Result<(), Box<dyn Error>> {
    let base = load_config(config_path)?;
    let scans = load_scans(scans_dir)?;
    let images = project_all(&scans, &base)?;
    let gt = load_reference(gt_path)?;
    let lengths = match lengths {
        Some(spec) => parse_lengths(spec)?,
        None => SCALED_LENGTHS.to_vec(),
    };
    fs::create_dir_all(out_dir)?;

    let variants: [(&str, fn(&mut RunConfig)); 5] = [
        ("baseline", |_| {}),
        ("scalar_weight", |c| c.training.ablations.scalar_weight = true),
        ("no_mah_gate", |c| c.training.ablations.no_mah_gate = true),
        ("no_masking", |c| c.training.ablations.no_masking = true),
        ("no_augmentation", |c| {
            c.training.ablations.no_augmentation = true
        }),
    ];

    let mut summary = serde_json::Map::new();
    for (name, apply) in variants {
        let mut config = base.clone();
        apply(&mut config);
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir)?;

        let mut model = FeatureModel::new(config.arch(), config.seed)?;
        let outcome = train(
            &mut model,
            &images,
            &config.train_config(),
            Some(&dir.join("train.csv")),
            None,
        )?;
        save_model(&model, &dir.join("model.ckpt"))?;
        let result = run_odometry(&mut model, &images, &config.odometry_config())?;
        save_trajectory(&result.trajectory, &dir.join("est.txt"))?;
        let report = kitti_drift(&result.trajectory, &gt, &lengths)?;
        write_drift_csv(&report, &dir.join("drift.csv"))?;
        eprintln!(
            "{name}: {:.4}% translational, {:.6} deg/m ({} windows skipped in training)",
            report.translational_percent, report.rotational_deg_per_m, outcome.skipped
        );
        summary.insert(name.to_string(), serde_json::to_value(&report)?);
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geobev::ablate::{run_ablation, to_csv};
use geobev::camera::{BevGridSpec, CameraRig};
use geobev::dataset::generate_dataset;
use geobev::error::{Error, Result};
use geobev::geo_mask::build_geo_mask;
use geobev::gradcheck::{format_report, run_gradcheck};
use geobev::model::FEATURE_STRIDE;
use geobev::train::{evaluate, train};
use geobev::Config;

/// Bird's-eye-view segmentation with geographically masked ConvGRU fusion.
#[derive(Parser)]
#[command(name = "geobev", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes and export them as a dataset directory.
    GenScenes {
        /// Config file (world, rig and grid keys are used).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every analytic gradient against central finite differences.
    Gradcheck {
        /// Config file; its seed drives the random test instances.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Train a model; writes checkpoint.gcgr, metrics.csv and config.txt into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every sample of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Metrics CSV path; defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the visibility mask of a rig as a PGM image.
    Mask {
        /// Rig file; defaults to the ring rig described by the config.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Grid as EXTENT:RESOLUTION in meters; defaults to the config grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image pixels per frustum sample.
        #[arg(long, default_value_t = FEATURE_STRIDE)]
        stride: usize,
        /// Weight of invalid cells; defaults to the config epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every temporal module at T = 1, 3, 5, 7.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::read(p),
        None => Ok(Config::default()),
    }
}

fn parse_grid(spec: &str) -> Result<BevGridSpec> {
    let bad = || Error::config("grid", format!("expected EXTENT:RESOLUTION, got `{spec}`"));
    let (e, r) = spec.split_once(':').ok_or_else(bad)?;
    let extent: f64 = e.trim().parse().map_err(|_| bad())?;
    let res: f64 = r.trim().parse().map_err(|_| bad())?;
    BevGridSpec::square(extent, res).map_err(|e| Error::config("grid", e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn run(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenScenes { config, seed, count, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let samples = generate_dataset(&cfg, count, &out)?;
            println!("{samples} samples from {count} scenes written to {}", out.display());
        }
        Command::Gradcheck { config, inject_fault } => {
            let cfg = load_config(config.as_deref())?;
            let results = run_gradcheck(cfg.seed, inject_fault.as_deref())?;
            print!("{}", format_report(&results));
            if !results.iter().all(|r| r.passed()) {
                return Ok(Outcome::VerificationFailed);
            }
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = train(&cfg, &data, &out)?;
            for row in &outcome.log {
                println!(
                    "epoch {:>3}  step {:>5}  loss {:.5}  val IoU {:.4}",
                    row.epoch, row.step, row.loss, row.val_iou
                );
            }
            println!("checkpoint written to {}", out.join("checkpoint.gcgr").display());
        }
        Command::Eval { checkpoint, data, config, out } => {
            let dir = checkpoint.parent().unwrap_or(Path::new("."));
            let cfg = match config {
                Some(p) => Config::read(&p)?,
                None => Config::read(&dir.join("config.txt"))?,
            };
            let report = evaluate(&cfg, &checkpoint, &data)?;
            print!("{}", report.to_table());
            let csv = out.unwrap_or_else(|| dir.join("eval.csv"));
            write_file(&csv, &report.to_csv())?;
        }
        Command::Mask { rig, grid, config, stride, epsilon, out } => {
            let cfg = load_config(config.as_deref())?;
            let rig = match rig {
                Some(p) => CameraRig::read(&p)?,
                None => CameraRig::ring(cfg.cameras, cfg.img_h, cfg.img_w, cfg.fov_deg, cfg.cam_height)?,
            };
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => cfg.grid(),
            };
            if stride == 0 || cfg.img_h % stride != 0 || cfg.img_w % stride != 0 {
                return Err(Error::config("stride", "must divide the image size"));
            }
            let cloud = rig.frustums(cfg.img_h / stride, cfg.img_w / stride, stride, &cfg.depth_bin_centers())?;
            let eps = epsilon.unwrap_or(cfg.epsilon);
            let mask = build_geo_mask(&cloud, &grid, eps).map_err(|e| Error::config("epsilon", e.to_string()))?;
            mask.write_pgm(&out)?;
            println!(
                "{} of {} cells valid; mask written to {}",
                mask.valid_count(),
                grid.num_cells(),
                out.display()
            );
        }
        Command::Ablate { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let rows = run_ablation(&cfg, &data)?;
            let csv = to_csv(&rows);
            print!("{csv}");
            write_file(&out, &csv)?;
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("GEOBEV_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: GEOBEV_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        },
        Err(_) => 1,
    };
    // Fails only if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dyna_loco::config::TrainConfig;
use dyna_loco::experiment::{
    ablate_rollout_lengths, eval_tracking_heatmap, heatmap_csv, run_calibration, train_run, HeatmapSpec,
    PolicySubject, RunSummary,
};
use dyna_loco::{checkpoint, Error, Result};

mod manifest;

use manifest::{unix_now, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "dyna-loco", version, about = "Dyna-style rollout augmentation for on-policy command tracking")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set scheduler.y=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Calibration file written by `calibrate`; supplies `threshold.delta`.
    #[arg(long, global = true)]
    calibration: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one training loop.
    Train,
    /// Sweep rollout lengths over seeds with the scheduler disabled.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "16,20,24,28,32")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Command-tracking error grid for a trained policy.
    Heatmap {
        /// Checkpoint directory (contains manifest.txt). Without `--config`, the
        /// environment of the run that wrote it is reused.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        vx: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        wz: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Long reference run that fixes the desk threshold.
    Calibrate,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut overrides = Vec::new();
    if let Some(path) = &common.calibration {
        overrides.push(format!("threshold.delta={}", read_calibration(path)?));
    }
    overrides.extend(common.set.iter().cloned());
    let cfg = TrainConfig::load_with_overrides(common.config.as_deref(), &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_calibration(path: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = TrainConfig::from_toml_str(&text)?;
    cfg.threshold
        .delta
        .ok_or_else(|| Error::Config(format!("{} has no threshold.delta", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.as_path();
    std::fs::create_dir_all(out)?;
    let name = match &cli.command {
        Command::Train => "train",
        Command::Ablate { .. } => "ablate",
        Command::Heatmap { .. } => "heatmap",
        Command::Calibrate => "calibrate",
    };
    let mut manifest = RunManifest::new(name, &cfg);
    manifest.write(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;

    match cli.command {
        Command::Train => {
            let outcome = train_run::<f64>(&cfg, Some(out))?;
            let summary = RunSummary::from_metrics(cfg.run.rollout, cfg.run.seed, &outcome.metrics, cfg.threshold.delta)?;
            std::fs::write(out.join("summary.json"), to_json(&summary))?;
            println!("{}", to_json(&summary));
        }
        Command::Ablate { lengths, seeds } => {
            let table = ablate_rollout_lengths(&cfg, &lengths, &seeds, Some(out))?;
            std::fs::write(out.join("ablation.json"), table.to_json())?;
            std::fs::write(out.join("ablation.csv"), table.to_csv())?;
            println!("{}", table.to_json());
        }
        Command::Heatmap { checkpoint: dir, vx, wz, trials } => {
            let ckpt = checkpoint::load::<f64>(&dir)?;
            let mut env = cfg.env.clone();
            if cli.common.config.is_none() {
                if let Some(run_dir) = dir.parent().and_then(Path::parent) {
                    if run_dir.join("manifest.json").exists() {
                        env = RunManifest::read(run_dir)?.config()?.env;
                    }
                }
            }
            let mut spec = HeatmapSpec::from(&cfg.heatmap);
            if let Some(v) = vx {
                spec.vx = v;
            }
            if let Some(w) = wz {
                spec.wz = w;
            }
            if let Some(t) = trials {
                spec.trials = t;
            }
            spec.validate()?;
            let mut subject = PolicySubject::new(&ckpt.actor, &env, cfg.run.seed, spec.warmup + spec.measure);
            let cells = eval_tracking_heatmap(&mut subject, &spec)?;
            let csv = heatmap_csv(&cells);
            std::fs::write(out.join("heatmap.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Calibrate => {
            let cal = run_calibration(&cfg, Some(&out.join("reference")))?;
            let file = format!(
                "# reference: {} iterations, {} steps, mean return {}\n[threshold]\ndelta = {:?}\n",
                cal.iterations, cal.budget, cal.reference_return, cal.delta
            );
            std::fs::write(out.join("calibration.toml"), file)?;
            std::fs::write(out.join("calibration.json"), to_json(&cal))?;
            println!("{}", to_json(&cal));
        }
    }
    manifest.finished_unix = Some(unix_now());
    manifest.write(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

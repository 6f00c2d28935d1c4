//! `vlidar` command line: `run`, `eval` and `synth`.
//!
//! Exit status is 0 on success, 1 when some frames failed but the rest were
//! written, and 2 on a fatal error (bad config, calibration or manifest).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vlidar::commands::{cmd_eval, cmd_run, cmd_synth, load_scenario};
use vlidar::config::PipelineConfig;
use vlidar::metrics::EvalProtocol;
use vlidar::scenario::ScenarioConfig;

#[derive(Parser, Debug)]
#[command(name = "vlidar", version, about = "Virtual LIDAR frames between real sweeps, from a mono camera")]
struct Cli {
    /// Pipeline config (TOML). Missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed in the config (and the scenario seed for synth).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Upsample a sequence: writes virtual clouds and motions.json.
    Run {
        /// Manifest file listing the frames.
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare virtual clouds with reference clouds of the same names.
    Eval {
        /// Directory of estimated `<frame>.bin` clouds.
        virtual_dir: PathBuf,
        /// Directory of reference clouds.
        truth_dir: PathBuf,
        /// Report path (JSON); a text table is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Evaluation protocol; defaults to the one in the config.
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        /// Only compare points that belong to tracked objects.
        #[arg(long)]
        per_object: bool,
    },
    /// Render a synthetic sequence with ground truth.
    Synth {
        /// Built-in scenario.
        #[arg(long, conflicts_with = "scenario", required_unless_present_any = ["scenario", "list"])]
        preset: Option<String>,
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Print the built-in scenarios and exit.
        #[arg(long)]
        list: bool,
        #[arg(long, required_unless_present = "list")]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Protocol {
    /// Whole frame, 16384 points.
    FullFrame,
    /// Cropped around the vehicle, ground removed, 2048 points.
    Vehicle,
    /// Every point. Slow on full sweeps.
    None,
}

fn fatal(e: impl std::fmt::Display) -> ExitCode {
    log::error!("{e}");
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(p) => match PipelineConfig::from_file(p) {
            Ok(c) => c,
            Err(e) => return fatal(e),
        },
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match cli.command {
        Command::Run { manifest, out } => match cmd_run(&manifest, &config, &out) {
            Ok(summary) => {
                for (frame, why) in &summary.failures {
                    eprintln!("frame {frame} failed: {why}");
                }
                println!(
                    "{} frames, {} anchors, {} virtual frames, {} failures -> {}",
                    summary.frames,
                    summary.anchors.len(),
                    summary.virtual_frames.len(),
                    summary.failures.len(),
                    out.display()
                );
                ExitCode::from(summary.exit_code() as u8)
            }
            Err(e) => fatal(e),
        },
        Command::Eval {
            virtual_dir,
            truth_dir,
            out,
            protocol,
            per_object,
        } => {
            if let Some(p) = protocol {
                config.protocol = match p {
                    Protocol::FullFrame => EvalProtocol::full_frame(),
                    Protocol::Vehicle => EvalProtocol::vehicle(),
                    Protocol::None => EvalProtocol::unrestricted(),
                };
            }
            if let Some(seed) = cli.seed {
                config.protocol.seed = seed;
            }
            match cmd_eval(&virtual_dir, &truth_dir, &config, per_object, &out) {
                Ok(report) => {
                    print!("{}", report.to_text());
                    if report.unpaired.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        eprintln!("unpaired frames: {}", report.unpaired.join(", "));
                        ExitCode::from(1)
                    }
                }
                Err(e) => fatal(e),
            }
        }
        Command::Synth {
            preset,
            scenario,
            list,
            out,
        } => {
            if list {
                for name in ScenarioConfig::PRESETS {
                    println!("{name}");
                }
                return ExitCode::SUCCESS;
            }
            let loaded = match (preset, scenario) {
                (Some(name), _) => ScenarioConfig::preset(&name)
                    .ok_or_else(|| format!("unknown preset {name:?}; try one of {}", ScenarioConfig::PRESETS.join(", "))),
                (None, Some(path)) => load_scenario(&path).map_err(|e| e.to_string()),
                (None, None) => Err("give --preset or --scenario".to_string()),
            };
            let mut sc = match loaded {
                Ok(s) => s,
                Err(e) => return fatal(e),
            };
            if let Some(seed) = cli.seed {
                sc.seed = seed;
            }
            let out = out.expect("clap requires --out");
            match cmd_synth(&sc, &out) {
                Ok(summary) => {
                    println!(
                        "{} lidar frames, {} camera-only frames -> {}",
                        summary.lidar_frames.len(),
                        summary.camera_only_frames.len(),
                        summary.manifest.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fatal(e),
            }
        }
    }
}

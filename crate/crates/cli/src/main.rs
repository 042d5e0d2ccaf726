//! `gabor-odo`: stage-by-stage and end-to-end runs of the four-pixel
//! odometry pipeline. Failures print one JSON object on stderr and exit
//! nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gabor_odo::config::{ExperimentConfig, OptimizerConfig, STRIDES_MS};
use gabor_odo::decoder::{condition, decode_stream, decode_windows};
use gabor_odo::experiment::{prepare_scenario, run_experiment, MaskSetup, RunOptions};
use gabor_odo::mask::GaborParams;
use gabor_odo::odometry::{integrate, score};
use gabor_odo::optimizer::{history_to_csv, optimize, random_starts, split_scenarios};
use gabor_odo::sensor::{simulate_with_kernels, SIM_RATE_HZ};
use gabor_odo::texture::{generate, TextureKind, TextureSpec};
use gabor_odo::trajectory::{gyro_measure, GyroModel};
use gabor_odo::{io, rng, Error};

#[derive(Parser)]
#[command(name = "gabor-odo", version, about = "Four-pixel Gabor-mask odometry simulator and toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel scenarios (default: GABOR_ODO_THREADS, else all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Decoder stride in milliseconds.
    #[arg(long, global = true, value_parser = parse_stride)]
    stride_ms: Option<u32>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a texture to an 8-bit PGM.
    GenTexture {
        /// Which `[[textures]]` entry to render.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Simulate one scenario: raw, differential, reference and gyro CSVs.
    Simulate {
        #[arg(long, default_value_t = 0)]
        scenario: u64,
    },
    /// Notch, low-pass and resample a raw four-channel DAQ log.
    Condition {
        #[arg(long)]
        input: PathBuf,
    },
    /// Decode speed from a differential signal CSV.
    Decode {
        #[arg(long)]
        input: PathBuf,
        /// Keep rejected windows and skip the median filter.
        #[arg(long)]
        all_windows: bool,
    },
    /// Search Gabor parameters on the training split.
    OptimizeMasks {
        /// Explicit start `xi0,sigma,alpha`; repeatable. Replaces random starts.
        #[arg(long = "start", value_parser = parse_params)]
        starts: Vec<GaborParams>,
    },
    /// Dead-reckon from speed estimates and gyro yaw rate.
    Odometry {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        gyro: PathBuf,
    },
    /// Score an estimated path against a reference path.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Run the configured end-to-end experiment.
    Experiment {
        /// Skip per-scenario signal traces.
        #[arg(long)]
        no_traces: bool,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::GenTexture { .. } => "gen-texture",
            Command::Simulate { .. } => "simulate",
            Command::Condition { .. } => "condition",
            Command::Decode { .. } => "decode",
            Command::OptimizeMasks { .. } => "optimize-masks",
            Command::Odometry { .. } => "odometry",
            Command::Evaluate { .. } => "evaluate",
            Command::Experiment { .. } => "experiment",
        }
    }
}

fn parse_stride(s: &str) -> Result<u32, String> {
    let v: u32 = s.parse().map_err(|_| format!("not an integer: {s}"))?;
    if STRIDES_MS.contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be one of {STRIDES_MS:?}"))
    }
}

fn parse_params(s: &str) -> Result<GaborParams, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [xi0, sigma, alpha] => GaborParams::new(xi0, sigma, alpha).map_err(|e| e.to_string()),
        _ => Err("expected xi0,sigma,alpha".into()),
    }
}

fn fail(stage: &str, kind: &str, message: &str, code: u8) -> ExitCode {
    let body = json!({ "error": { "stage": stage, "kind": kind, "message": message } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("cli", "usage", e.to_string().trim(), 2),
    };
    let stage = cli.command.stage();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(stage, e.kind(), &e.to_string(), 1),
    }
}

/// Config from `--config` (or defaults), with flag overrides applied.
fn load_config(g: &Global, require: bool) -> gabor_odo::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if require => return Err(Error::Config("--config is required for this command".into())),
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(s) = g.stride_ms {
        cfg.stride_ms = s;
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn jobs(g: &Global) -> gabor_odo::Result<usize> {
    if let Some(j) = g.jobs {
        return Ok(j);
    }
    match std::env::var("GABOR_ODO_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("GABOR_ODO_THREADS={v:?} is not a count"))),
        Err(_) => Ok(0),
    }
}

fn out_path(g: &Global, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> gabor_odo::Result<()> {
    io::write_file(path, contents)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn run(cli: &Cli) -> gabor_odo::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenTexture { index } => {
            let cfg = load_config(g, false)?;
            let spec = match cfg.textures.get(*index) {
                Some(s) => s.clone(),
                None if g.config.is_none() => TextureSpec::new(
                    TextureKind::BandlimitedNoise {
                        low_cpm: 10.0,
                        high_cpm: 250.0,
                        seed: 0,
                    },
                    1024,
                    1.0,
                ),
                None => return Err(Error::Config(format!("no [[textures]] entry {index}"))),
            };
            let spec = match g.seed {
                Some(seed) => spec.with_seed(seed),
                None => spec,
            };
            let field = generate(&spec)?;
            let out = out_path(g, "texture.pgm");
            write(&out, io::texture_to_pgm(&field))?;
            print_json(&json!({ "output": out, "width": field.width(), "height": field.height(), "extent_m": field.extent_m() }));
        }
        Command::Simulate { scenario } => {
            let cfg = load_config(g, true)?;
            let dir = out_path(g, ".");
            let s = prepare_scenario(&cfg, *scenario)?;
            let masks = MaskSetup::from_config(&cfg)?;
            let heights = cfg.heights.profile.series(&cfg.sensor, s.world.len(), 1.0 / SIM_RATE_HZ, s.seed)?;
            let (raw, signal) = simulate_with_kernels(&s.texture, &masks.kernels, &cfg.sensor, &s.world, &heights, s.seed)?;
            let gyro = gyro_measure(
                &s.reference,
                &GyroModel {
                    seed: rng::derive_seed(s.seed, rng::tag::GYRO, 0),
                    ..cfg.gyro
                },
            )?;
            write(&dir.join("raw.csv"), io::four_channel_to_csv(&raw))?;
            write(&dir.join("signal.csv"), io::signal_to_csv(&signal))?;
            write(&dir.join("reference.csv"), io::path_to_csv(&s.reference))?;
            write(&dir.join("gyro.csv"), io::gyro_to_csv(&s.reference.t, &gyro))?;
            write(&dir.join("resolved_config.toml"), cfg.to_toml()?)?;
            print_json(&json!({ "output_dir": dir, "samples": raw.len(), "xi_ground": masks.xi_ground }));
        }
        Command::Condition { input } => {
            let cfg = load_config(g, false)?;
            let raw = io::four_channel_from_csv(&io::read_text(input)?)?;
            let signal = condition(&raw, &cfg.conditioning)?;
            let out = out_path(g, "signal.csv");
            write(&out, io::signal_to_csv(&signal))?;
            print_json(&json!({ "output": out, "input_samples": raw.len(), "output_samples": signal.len() }));
        }
        Command::Decode { input, all_windows } => {
            let cfg = load_config(g, false)?;
            let masks = MaskSetup::from_config(&cfg)?;
            let signal = io::signal_from_csv(&io::read_text(input)?)?;
            let est = if *all_windows {
                decode_windows(&signal, cfg.stride_ms, masks.xi_ground, &cfg.decoder)?
            } else {
                decode_stream(&signal, cfg.stride_ms, masks.xi_ground, &cfg.decoder)?
            };
            let out = out_path(g, "estimates.csv");
            write(&out, io::estimates_to_csv(&est))?;
            let accepted = est.iter().filter(|e| e.accepted).count();
            print_json(&json!({ "output": out, "windows": est.len(), "accepted": accepted }));
        }
        Command::OptimizeMasks { starts } => {
            let cfg = load_config(g, true)?;
            let opt: OptimizerConfig = cfg
                .optimizer
                .clone()
                .ok_or_else(|| Error::Config("optimize-masks needs an [optimizer] section".into()))?;
            let splits = split_scenarios(opt.scenario_count, cfg.seed);
            let obj = cfg.objective(&opt, splits.train.clone());
            let starts = if starts.is_empty() {
                random_starts(&opt.bounds, opt.random_starts, cfg.seed)
            } else {
                starts.clone()
            };
            let res = optimize(&obj, &opt.bounds, &starts, &opt.nelder_mead)?;
            let dir = out_path(g, ".");
            let text = serde_json::to_string_pretty(&res).map_err(|e| Error::Config(e.to_string()))?;
            write(&dir.join("optimize_result.json"), text + "\n")?;
            write(&dir.join("optimize_history.csv"), history_to_csv(&res.history))?;
            let masks = gabor_odo::mask::rasterize(&res.best_params, cfg.sensor.view_px)?;
            write(&dir.join("masks.json"), io::mask_to_json(&masks, Some(res.best_params)))?;
            print_json(&json!({
                "best_params": res.best_params,
                "best_objective": res.best_objective,
                "baseline_objective": res.baseline_objective,
            }));
        }
        Command::Odometry { estimates, gyro } => {
            let cfg = load_config(g, false)?;
            let est = io::estimates_from_csv(&io::read_text(estimates)?)?;
            let (t, omega) = io::gyro_from_csv(&io::read_text(gyro)?)?;
            let path = integrate(&est, &t, &omega, &cfg.odometry)?;
            let out = out_path(g, "estimate.csv");
            write(&out, io::path_to_csv(&path))?;
            let (x, y) = path.endpoint().unwrap_or((0.0, 0.0));
            print_json(&json!({ "output": out, "samples": path.len(), "endpoint": [x, y] }));
        }
        Command::Evaluate { estimate, reference } => {
            let est = io::path_from_csv(&io::read_text(estimate)?)?;
            let reference = io::path_from_csv(&io::read_text(reference)?)?;
            let s = score(&est, &reference)?;
            let report = serde_json::to_value(s).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(out) = &g.out {
                write(out, serde_json::to_string_pretty(&report).expect("json value") + "\n")?;
            }
            print_json(&report);
        }
        Command::Experiment { no_traces } => {
            let cfg = load_config(g, true)?;
            let outcome = run_experiment(
                &cfg,
                RunOptions {
                    jobs: jobs(g)?,
                    write_traces: !no_traces,
                },
            )?;
            print_json(&json!({
                "output_dir": cfg.output_dir,
                "status": outcome.manifest.status,
                "digest": outcome.manifest.digest(),
                "groups": outcome.groups,
                "held_out": outcome.held_out,
            }));
        }
    }
    Ok(())
}

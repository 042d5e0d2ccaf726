//! End-to-end experiment runner: texture, simulation, decoding, optional
//! mask optimization, dead reckoning and scoring for every scenario.
//!
//! Every run writes `resolved_config.toml` and `manifest.json` into the
//! output directory, the manifest also on failure. Scenario artifacts go
//! to their own subdirectories so parallel scenarios never share a file.
//! All numeric outputs are pure functions of the resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind, PathSource};
use crate::decoder::{decode_stream, decode_windows, window_targets};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::{GaborParams, MaskRaster};
use crate::odometry::{integrate, integrate_rates, score, TrajectoryScore};
use crate::optimizer::{self, Metric, OptimResult, PreparedObjective};
use crate::rng;
use crate::sensor::{simulate_with_kernels, DetectorKernels, HeightProfile, SignalTrace, SIM_RATE_HZ};
use crate::svg;
use crate::texture::{generate, TextureField};
use crate::trajectory::{gyro_measure, resample, GyroModel, PlanarPath};

/// Tail over which window targets average the true speed.
pub const TARGET_TAIL_S: f64 = 0.1;

/// One scenario's world: texture and reference path.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: u64,
    pub seed: u64,
    pub texture_index: usize,
    pub path_index: usize,
    pub texture: TextureField,
    /// Reference path in its own start frame (origin, heading 0).
    pub reference: PlanarPath,
    /// The same path placed on the texture.
    pub world: PlanarPath,
}

/// Builds scenario `id`: texture `id mod n_textures`, path
/// `(id / n_textures) mod n_paths`, generator seeds derived from the
/// master seed, and a random start point on the texture.
pub fn prepare_scenario(cfg: &ExperimentConfig, id: u64) -> Result<Scenario> {
    let nt = cfg.textures.len() as u64;
    let np = cfg.paths.len() as u64;
    if nt == 0 || np == 0 {
        return Err(Error::Empty("textures or paths"));
    }
    let seed = rng::derive_seed(cfg.seed, rng::tag::SCENARIO, id);
    let texture_index = (id % nt) as usize;
    let path_index = ((id / nt) % np) as usize;
    let texture = generate(&cfg.textures[texture_index].with_seed(rng::derive_seed(seed, rng::tag::TEXTURE, 0)))?;
    let raw = match &cfg.paths[path_index] {
        PathSource::Spec(spec) => spec.with_seed(rng::derive_seed(seed, rng::tag::PATH, 0)).generate()?,
        PathSource::Csv { csv } => io::path_from_csv(&io::read_text(csv)?)
            .map_err(|e| Error::format(csv.display().to_string(), e.to_string()))?,
    };
    let at_rate = if raw.len() > 1 && (raw.rate_hz()? - SIM_RATE_HZ).abs() > 1e-6 {
        resample(&raw, SIM_RATE_HZ)?
    } else {
        raw
    };
    let reference = at_rate.relative_to_start();
    let mut r = rng::stream(seed, rng::tag::PATH, 1);
    let extent = texture.extent_m();
    let world = reference.translated(r.random::<f64>() * extent[0], r.random::<f64>() * extent[1]);
    Ok(Scenario {
        id,
        seed,
        texture_index,
        path_index,
        texture,
        reference,
        world,
    })
}

/// Masks, matching detector kernels and the ground frequency the
/// decoder assumes (always at nominal height).
#[derive(Debug, Clone)]
pub struct MaskSetup {
    pub label: String,
    pub params: GaborParams,
    pub masks: MaskRaster,
    pub kernels: DetectorKernels,
    pub xi_ground: f64,
}

impl MaskSetup {
    pub fn new(label: &str, params: GaborParams, masks: MaskRaster, cfg: &ExperimentConfig) -> Result<Self> {
        let masks = masks.resampled(cfg.sensor.view_px);
        let kernels = DetectorKernels::new(&masks, &cfg.sensor)?;
        Ok(Self {
            label: label.to_string(),
            params,
            xi_ground: cfg.sensor.ground_frequency(params.xi0, cfg.sensor.h_nom_m),
            masks,
            kernels,
        })
    }

    /// Masks from the config. Mask files must carry their parameters,
    /// since the decoder needs the carrier frequency.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (masks, params) = cfg.masks.load(cfg.sensor.view_px)?;
        let params = params.ok_or_else(|| {
            Error::Config("[masks] file has no params; the decoder needs xi0".into())
        })?;
        Self::new("masks", params, masks, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub group: String,
    pub scenario: u64,
    pub texture: usize,
    pub path: usize,
    pub windows: usize,
    pub accepted: usize,
    pub rmse_mps: f64,
    pub mae_mps: f64,
    pub ate_m: f64,
    pub drift_pct: f64,
    pub path_length_m: f64,
    pub duration_s: f64,
}

/// Everything one scenario run produces.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub signal: SignalTrace,
    pub estimates: Vec<crate::decoder::SpeedEstimate>,
    pub gyro: Vec<f64>,
    pub estimate: PlanarPath,
    /// Speed errors of the accepted, filtered estimates.
    pub errors: Vec<f64>,
}

/// Simulate, decode, integrate and score one scenario.
pub fn run_scenario(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    masks: &MaskSetup,
    heights: &HeightProfile,
    group: &str,
) -> Result<ScenarioRun> {
    let n = scenario.world.len();
    let h = heights.series(&cfg.sensor, n, 1.0 / SIM_RATE_HZ, scenario.seed)?;
    let (_, signal) = simulate_with_kernels(&scenario.texture, &masks.kernels, &cfg.sensor, &scenario.world, &h, scenario.seed)?;
    let windows = decode_windows(&signal, cfg.stride_ms, masks.xi_ground, &cfg.decoder)?.len();
    let estimates = decode_stream(&signal, cfg.stride_ms, masks.xi_ground, &cfg.decoder)?;
    let ends: Vec<f64> = estimates.iter().map(|e| e.t_s).collect();
    let targets = window_targets(&scenario.reference, &ends, TARGET_TAIL_S);
    let errors: Vec<f64> = estimates.iter().zip(&targets).map(|(e, v)| e.v_hat - v).collect();

    let gyro_model = GyroModel {
        seed: rng::derive_seed(scenario.seed, rng::tag::GYRO, 0),
        ..cfg.gyro
    };
    let gyro = gyro_measure(&scenario.reference, &gyro_model)?;
    let estimate = if estimates.is_empty() {
        // Nothing accepted: dead reckoning sees a standstill.
        let zeros = vec![0.0; n];
        integrate_rates(&scenario.reference.t, &zeros, &gyro, cfg.odometry.integration)?
    } else {
        integrate(&estimates, &scenario.reference.t, &gyro, &cfg.odometry)?
    };
    let TrajectoryScore {
        ate_m,
        drift_pct,
        path_length_m,
        duration_s,
    } = score(&estimate, &scenario.reference)?;
    let report = ScenarioReport {
        group: group.to_string(),
        scenario: scenario.id,
        texture: scenario.texture_index,
        path: scenario.path_index,
        windows,
        accepted: estimates.len(),
        rmse_mps: Metric::Rmse.of(&errors),
        mae_mps: Metric::Mae.of(&errors),
        ate_m,
        drift_pct,
        path_length_m,
        duration_s,
    };
    Ok(ScenarioRun {
        report,
        signal,
        estimates,
        gyro,
        estimate,
        errors,
    })
}

/// Pooled statistics over one group of scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub scenarios: usize,
    pub windows: usize,
    pub accepted: usize,
    pub rmse_mps: f64,
    pub mae_mps: f64,
    pub mean_ate_m: f64,
    pub mean_drift_pct: f64,
}

fn summarize(group: &str, runs: &[(ScenarioReport, Vec<f64>)]) -> GroupSummary {
    let errors: Vec<f64> = runs.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    let n = runs.len().max(1) as f64;
    GroupSummary {
        group: group.to_string(),
        scenarios: runs.len(),
        windows: runs.iter().map(|(r, _)| r.windows).sum(),
        accepted: runs.iter().map(|(r, _)| r.accepted).sum(),
        rmse_mps: Metric::Rmse.of(&errors),
        mae_mps: Metric::Mae.of(&errors),
        mean_ate_m: runs.iter().map(|(r, _)| r.ate_m).sum::<f64>() / n,
        mean_drift_pct: runs.iter().map(|(r, _)| r.drift_pct).sum::<f64>() / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    /// `running`, `complete` or `failed`.
    pub status: String,
    pub stages: Vec<StageRecord>,
    pub error: Option<ErrorRecord>,
    /// SHA-256 of every artifact, keyed by path relative to the output dir.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    /// Digest over all artifact hashes, for repeat-run comparisons.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.files {
            h.update(k.as_bytes());
            h.update([0]);
            h.update(v.as_bytes());
            h.update([b'\n']);
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Output directory that hashes what it writes and keeps the manifest
/// current after every stage.
struct Output {
    root: PathBuf,
    manifest: Mutex<Manifest>,
}

impl Output {
    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let bytes = contents.as_ref();
        io::write_file(&self.root.join(rel), bytes)?;
        self.manifest
            .lock()
            .expect("manifest lock")
            .files
            .insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn stage(&self, name: &str, status: &str) -> Result<()> {
        {
            let mut m = self.manifest.lock().expect("manifest lock");
            match m.stages.iter_mut().find(|s| s.name == name) {
                Some(s) => s.status = status.to_string(),
                None => m.stages.push(StageRecord {
                    name: name.to_string(),
                    status: status.to_string(),
                }),
            }
        }
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let m = self.manifest.lock().expect("manifest lock").clone();
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
        io::write_file(&self.root.join("manifest.json"), text + "\n")
    }

    /// Runs `f` as a named stage, recording its outcome.
    fn run_stage<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.stage(name, "running")?;
        let out = f();
        self.stage(name, if out.is_ok() { "complete" } else { "failed" })?;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Scenario-level parallelism; 0 uses all cores.
    pub jobs: usize,
    /// Write per-scenario signal traces (largest artifacts).
    pub write_traces: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 0,
            write_traces: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutComparison {
    pub test_scenarios: Vec<u64>,
    pub fixed_objective: f64,
    pub optimized_objective: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<ScenarioReport>,
    pub groups: Vec<GroupSummary>,
    pub optimization: Option<OptimResult>,
    pub held_out: Option<HeldOutComparison>,
    pub manifest: Manifest,
}

/// Runs the configured experiment into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutcome> {
    let out = Output {
        root: cfg.output_dir.clone(),
        manifest: Mutex::new(Manifest {
            schema_version: crate::config::SCHEMA_VERSION,
            kind: cfg.kind,
            status: "running".into(),
            stages: Vec::new(),
            error: None,
            files: BTreeMap::new(),
        }),
    };
    std::fs::create_dir_all(&out.root).map_err(|e| Error::file(&out.root, e))?;
    let result = out
        .run_stage("resolve_config", || {
            out.write("resolved_config.toml", cfg.to_toml()?)?;
            cfg.validate()
        })
        .and_then(|_| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(opts.jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| run_stages(cfg, opts, &out))
        });
    {
        let mut m = out.manifest.lock().expect("manifest lock");
        match &result {
            Ok(_) => m.status = "complete".into(),
            Err(e) => {
                m.status = "failed".into();
                m.error = Some(ErrorRecord {
                    kind: e.kind().into(),
                    message: e.to_string(),
                });
            }
        }
    }
    out.flush()?;
    let (reports, groups, optimization, held_out) = result?;
    let manifest = out.manifest.into_inner().expect("manifest lock");
    Ok(ExperimentOutcome {
        reports,
        groups,
        optimization,
        held_out,
        manifest,
    })
}

type StageResults = (Vec<ScenarioReport>, Vec<GroupSummary>, Option<OptimResult>, Option<HeldOutComparison>);

fn run_stages(cfg: &ExperimentConfig, opts: RunOptions, out: &Output) -> Result<StageResults> {
    let mut optimization = None;
    let mut held_out = None;
    // (group, masks, heights, scenario ids)
    let mut plan: Vec<(String, MaskSetup, HeightProfile, Vec<u64>)> = Vec::new();
    match cfg.kind {
        ExperimentKind::Standard => {
            let masks = MaskSetup::from_config(cfg)?;
            plan.push(("standard".into(), masks, cfg.heights.profile.clone(), cfg.scenario_ids()));
        }
        ExperimentKind::HeightSweep => {
            let masks = MaskSetup::from_config(cfg)?;
            let window_s = cfg.decoder.window_len as f64 / cfg.decoder.sample_rate_hz;
            for &pct in &cfg.heights.sweep_pct {
                let profile = if pct == 0.0 {
                    HeightProfile::Nominal
                } else {
                    HeightProfile::PerWindow { range_pct: pct, window_s }
                };
                plan.push((format!("range_{}", fmt_pct(pct)), masks.clone(), profile, cfg.scenario_ids()));
            }
        }
        ExperimentKind::MaskComparison => {
            let opt = cfg.optimizer.as_ref().ok_or_else(|| Error::Config("missing [optimizer]".into()))?;
            let splits = optimizer::split_scenarios(opt.scenario_count, cfg.seed);
            let result = out.run_stage("optimize", || {
                let obj = cfg.objective(opt, splits.train.clone());
                let starts = optimizer::random_starts(&opt.bounds, opt.random_starts, cfg.seed);
                let res = optimizer::optimize(&obj, &opt.bounds, &starts, &opt.nelder_mead)?;
                out.write("optimizer/result.json", json(&res)?)?;
                out.write("optimizer/history.csv", optimizer::history_to_csv(&res.history))?;
                out.write("optimizer/splits.json", json(&splits)?)?;
                Ok(res)
            })?;
            let fixed = GaborParams::FIXED;
            let best = result.best_params;
            let comparison = out.run_stage("held_out_objective", || {
                let test = PreparedObjective::new(&cfg.objective(opt, splits.test.clone()))?;
                let c = HeldOutComparison {
                    test_scenarios: splits.test.clone(),
                    fixed_objective: test.evaluate(&fixed)?.value,
                    optimized_objective: test.evaluate(&best)?.value,
                };
                out.write("optimizer/held_out.json", json(&c)?)?;
                Ok(c)
            })?;
            let view = cfg.sensor.view_px;
            let optimized = crate::mask::rasterize(&best, view)?;
            out.write("optimizer/masks_optimized.json", io::mask_to_json(&optimized, Some(best)))?;
            let fixed_setup = MaskSetup::new("fixed", fixed, crate::mask::rasterize(&fixed, view)?, cfg)?;
            let best_setup = MaskSetup::new("optimized", best, optimized, cfg)?;
            plan.push(("fixed".into(), fixed_setup, cfg.heights.profile.clone(), splits.test.clone()));
            plan.push(("optimized".into(), best_setup, cfg.heights.profile.clone(), splits.test.clone()));
            optimization = Some(result);
            held_out = Some(comparison);
        }
    }

    let mut reports = Vec::new();
    let mut groups = Vec::new();
    for (group, masks, heights, ids) in &plan {
        let stage = format!("scenarios/{group}");
        let runs = out.run_stage(&stage, || {
            ids.par_iter()
                .map(|&id| -> Result<(ScenarioReport, Vec<f64>)> {
                    let scenario = prepare_scenario(cfg, id)?;
                    let run = run_scenario(cfg, &scenario, masks, heights, group)?;
                    write_scenario(out, group, &scenario, &run, opts)?;
                    Ok((run.report, run.errors))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        groups.push(summarize(group, &runs));
        reports.extend(runs.into_iter().map(|(r, _)| r));
    }
    out.run_stage("summary", || {
        out.write("summary.csv", summary_csv(&reports))?;
        out.write("groups.csv", groups_csv(&groups))?;
        out.write("summary.md", summary_markdown(cfg, &reports, &groups, held_out.as_ref()))
    })?;
    Ok((reports, groups, optimization, held_out))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(e.to_string()))
}

fn fmt_pct(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{p:.0}")
    } else {
        format!("{p}").replace('.', "p")
    }
}

fn write_scenario(out: &Output, group: &str, s: &Scenario, run: &ScenarioRun, opts: RunOptions) -> Result<()> {
    let dir = format!("{group}/scenario_{:04}", s.id);
    if opts.write_traces {
        out.write(&format!("{dir}/signal.csv"), io::signal_to_csv(&run.signal))?;
    }
    out.write(&format!("{dir}/estimates.csv"), io::estimates_to_csv(&run.estimates))?;
    out.write(&format!("{dir}/gyro.csv"), io::gyro_to_csv(&s.reference.t, &run.gyro))?;
    out.write(&format!("{dir}/reference.csv"), io::path_to_csv(&s.reference))?;
    out.write(&format!("{dir}/estimate.csv"), io::path_to_csv(&run.estimate))?;
    out.write(&format!("{dir}/report.json"), json(&run.report)?)?;
    let title = format!(
        "{group} scenario {}: ATE {:.3} m, drift {:.2}%",
        s.id, run.report.ate_m, run.report.drift_pct
    );
    out.write(&format!("{dir}/overlay.svg"), svg::trajectory_overlay(&s.reference, &run.estimate, &title))
}

const SUMMARY_HEADER: &str =
    "group,scenario,texture,path,windows,accepted,rmse_mps,mae_mps,ate_m,drift_pct,path_length_m,duration_s";

pub fn summary_csv(reports: &[ScenarioReport]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in reports {
        s += &format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.4},{:.4},{:.3}\n",
            r.group,
            r.scenario,
            r.texture,
            r.path,
            r.windows,
            r.accepted,
            r.rmse_mps,
            r.mae_mps,
            r.ate_m,
            r.drift_pct,
            r.path_length_m,
            r.duration_s
        );
    }
    s
}

pub fn groups_csv(groups: &[GroupSummary]) -> String {
    let mut s = String::from("group,scenarios,windows,accepted,rmse_mps,mae_mps,mean_ate_m,mean_drift_pct\n");
    for g in groups {
        s += &format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.4}\n",
            g.group, g.scenarios, g.windows, g.accepted, g.rmse_mps, g.mae_mps, g.mean_ate_m, g.mean_drift_pct
        );
    }
    s
}

fn summary_markdown(
    cfg: &ExperimentConfig,
    reports: &[ScenarioReport],
    groups: &[GroupSummary],
    held_out: Option<&HeldOutComparison>,
) -> String {
    let mut s = format!("# Experiment summary ({:?})\n\n", cfg.kind);
    s += &format!("Seed {}, stride {} ms, {} scenario runs.\n\n", cfg.seed, cfg.stride_ms, reports.len());
    s += "| group | scenarios | accepted / windows | RMSE (m/s) | MAE (m/s) | mean ATE (m) | mean drift (%) |\n";
    s += "|---|---:|---:|---:|---:|---:|---:|\n";
    for g in groups {
        s += &format!(
            "| {} | {} | {} / {} | {:.4} | {:.4} | {:.3} | {:.2} |\n",
            g.group, g.scenarios, g.accepted, g.windows, g.rmse_mps, g.mae_mps, g.mean_ate_m, g.mean_drift_pct
        );
    }
    if let Some(h) = held_out {
        s += &format!(
            "\nHeld-out objective on {} test scenarios: fixed {:.5} m/s, optimized {:.5} m/s.\n",
            h.test_scenarios.len(),
            h.fixed_objective,
            h.optimized_objective
        );
    }
    s += "\n## Scenarios\n\n";
    s += "| group | scenario | texture | path | RMSE (m/s) | ATE (m) | drift (%) | length (m) |\n";
    s += "|---|---:|---:|---:|---:|---:|---:|---:|\n";
    for r in reports {
        s += &format!(
            "| {} | {} | {} | {} | {:.4} | {:.3} | {:.2} | {:.2} |\n",
            r.group, r.scenario, r.texture, r.path, r.rmse_mps, r.ate_m, r.drift_pct, r.path_length_m
        );
    }
    s
}

/// Reads a manifest back from an output directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    serde_json::from_str(&io::read_text(&path)?).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

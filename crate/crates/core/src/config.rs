//! Experiment configuration: a versioned TOML document covering every
//! pipeline stage. Loading resolves relative file paths against the
//! config's directory and validates everything before any compute; the
//! resolved form (all defaults written out) is what runs record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{ConditioningConfig, DecoderConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::mask::{rasterize, GaborParams, MaskRaster};
use crate::odometry::OdometryConfig;
use crate::optimizer::{Bounds, Metric, NelderMeadConfig, ObjectiveConfig};
use crate::sensor::{HeightProfile, SensorConfig};
use crate::texture::{TextureKind, TextureSpec};
use crate::trajectory::{GyroModel, PathSpec};

pub const SCHEMA_VERSION: u32 = 1;

/// Stride values the CLI accepts.
pub const STRIDES_MS: [u32; 3] = [1, 10, 33];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Every scenario once with the configured masks and heights.
    #[default]
    Standard,
    /// Scenarios repeated for each height range in `heights.sweep_pct`.
    HeightSweep,
    /// Fixed vs optimized masks on a held-out split.
    MaskComparison,
}

/// Masks given either as Gabor parameters or as a mask JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    Params(GaborParams),
    File { file: PathBuf },
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::Params(GaborParams::FIXED)
    }
}

impl MaskSource {
    /// Masks at `resolution` and the parameters that made them, if known.
    pub fn load(&self, resolution: usize) -> Result<(MaskRaster, Option<GaborParams>)> {
        match self {
            MaskSource::Params(p) => Ok((rasterize(p, resolution)?, Some(*p))),
            MaskSource::File { file } => {
                let (m, p) = io::mask_from_json(&io::read_text(file)?)?;
                Ok((m.resampled(resolution), p))
            }
        }
    }
}

/// A generated path or a recorded one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathSource {
    Csv { csv: PathBuf },
    Spec(PathSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeightsConfig {
    pub profile: HeightProfile,
    /// Ranges in percent for height sweeps; 0 means nominal.
    pub sweep_pct: Vec<f64>,
}

impl Default for HeightsConfig {
    fn default() -> Self {
        Self {
            profile: HeightProfile::Nominal,
            sweep_pct: vec![0.0, 10.0, 25.0, 50.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub bounds: Bounds,
    /// Random starts in addition to the fixed baseline.
    pub random_starts: usize,
    pub nelder_mead: NelderMeadConfig,
    pub metric: Metric,
    pub windows_per_scenario: usize,
    pub stride_ms: u32,
    /// Scenarios split 70/10/20 into train, validation and test.
    pub scenario_count: usize,
    pub height_range_pct: f64,
    pub rejection_penalty: f64,
    pub rejection_allowance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = ObjectiveConfig::default();
        Self {
            bounds: Bounds::default(),
            random_starts: 2,
            nelder_mead: NelderMeadConfig::default(),
            metric: o.metric,
            windows_per_scenario: o.windows_per_scenario,
            stride_ms: o.stride_ms,
            scenario_count: 20,
            height_range_pct: 0.0,
            rejection_penalty: o.rejection_penalty,
            rejection_allowance: o.rejection_allowance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Scenario count; 0 runs one per texture/path pair.
    pub scenarios: usize,
    pub stride_ms: u32,
    pub output_dir: PathBuf,
    pub sensor: SensorConfig,
    pub masks: MaskSource,
    pub textures: Vec<TextureSpec>,
    pub paths: Vec<PathSource>,
    pub heights: HeightsConfig,
    pub decoder: DecoderConfig,
    pub conditioning: ConditioningConfig,
    pub odometry: OdometryConfig,
    pub gyro: GyroModel,
    pub optimizer: Option<OptimizerConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: ExperimentKind::Standard,
            seed: 0,
            scenarios: 0,
            stride_ms: 10,
            output_dir: PathBuf::from("out"),
            sensor: SensorConfig::default(),
            masks: MaskSource::default(),
            textures: Vec::new(),
            paths: Vec::new(),
            heights: HeightsConfig::default(),
            decoder: DecoderConfig::default(),
            conditioning: ConditioningConfig::default(),
            odometry: OdometryConfig::default(),
            gyro: GyroModel {
                noise_std: 0.002,
                ..Default::default()
            },
            optimizer: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses without touching the filesystem. Relative paths stay relative.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// Reads, resolves file references against the config's directory,
    /// and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&io::read_text(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes every relative file reference relative to `base` instead.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let MaskSource::File { file } = &mut self.masks {
            fix(file);
        }
        for p in &mut self.paths {
            if let PathSource::Csv { csv } = p {
                fix(csv);
            }
        }
        for t in &mut self.textures {
            if let TextureKind::ImageFile { path } = &mut t.kind {
                let mut p = PathBuf::from(&*path);
                fix(&mut p);
                *path = p.to_string_lossy().into_owned();
            }
        }
        fix(&mut self.output_dir);
    }

    /// Full schema check. File inputs must exist.
    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| Error::Config(format!("[{section}] {e}"));
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version must be {SCHEMA_VERSION}")));
        }
        self.sensor.validate().map_err(|e| ctx("sensor", e))?;
        self.decoder.validate().map_err(|e| ctx("decoder", e))?;
        self.conditioning.validate().map_err(|e| ctx("conditioning", e))?;
        self.odometry.validate().map_err(|e| ctx("odometry", e))?;
        if (self.odometry.rate_hz - crate::sensor::SIM_RATE_HZ).abs() > 1e-9 {
            return Err(Error::Config("[odometry] rate_hz must match the 1 kHz simulation clock".into()));
        }
        if self.stride_ms == 0 {
            return Err(Error::Config("stride_ms must be >= 1".into()));
        }
        if !(self.gyro.noise_std >= 0.0 && self.gyro.bias_walk_std >= 0.0 && self.gyro.bias.is_finite()) {
            return Err(Error::Config("[gyro] noise levels must be >= 0".into()));
        }
        match &self.masks {
            MaskSource::Params(p) => p.validate().map_err(|e| ctx("masks", e))?,
            MaskSource::File { file } => require_file(file, "masks")?,
        }
        if self.textures.is_empty() {
            return Err(Error::Config("at least one [[textures]] entry is required".into()));
        }
        for t in &self.textures {
            t.validate().map_err(|e| ctx("textures", e))?;
            if let TextureKind::ImageFile { path } = &t.kind {
                require_file(Path::new(path), "textures")?;
            }
        }
        if self.paths.is_empty() {
            return Err(Error::Config("at least one [[paths]] entry is required".into()));
        }
        for p in &self.paths {
            match p {
                PathSource::Csv { csv } => require_file(csv, "paths")?,
                PathSource::Spec(s) => {
                    if !(s.duration_s > 0.0 && s.rate_hz > 0.0) {
                        return Err(Error::Config("[paths] duration_s and rate_hz must be > 0".into()));
                    }
                }
            }
        }
        // Heights are checked by drawing a short series.
        self.heights
            .profile
            .series(&self.sensor, 2, 1e-3, 0)
            .map_err(|e| ctx("heights", e))?;
        match self.kind {
            ExperimentKind::Standard => {}
            ExperimentKind::HeightSweep => {
                if self.heights.sweep_pct.is_empty() {
                    return Err(Error::Config("[heights] sweep_pct must not be empty".into()));
                }
                if self.heights.sweep_pct.iter().any(|p| !(0.0..100.0).contains(p)) {
                    return Err(Error::Config("[heights] sweep_pct entries must lie in [0, 100)".into()));
                }
            }
            ExperimentKind::MaskComparison => {
                let opt = self.optimizer.as_ref().ok_or_else(|| {
                    Error::Config("mask_comparison needs an [optimizer] section".into())
                })?;
                if self.paths.iter().any(|p| matches!(p, PathSource::Csv { .. })) {
                    return Err(Error::Config("mask_comparison needs generated [[paths]], not CSV".into()));
                }
                if opt.scenario_count < 5 {
                    return Err(Error::Config("[optimizer] scenario_count must be >= 5 for a test split".into()));
                }
            }
        }
        if let Some(opt) = &self.optimizer {
            opt.bounds.validate().map_err(|e| ctx("optimizer", e))?;
            self.objective(opt, Vec::new()).validate().map_err(|e| ctx("optimizer", e))?;
        }
        Ok(())
    }

    /// Scenario ids of a standard run.
    pub fn scenario_ids(&self) -> Vec<u64> {
        let n = match self.scenarios {
            0 => self.textures.len() * self.paths.len(),
            n => n,
        };
        (0..n as u64).collect()
    }

    /// Objective over generated paths for the mask optimizer.
    pub fn objective(&self, opt: &OptimizerConfig, scenarios: Vec<u64>) -> ObjectiveConfig {
        ObjectiveConfig {
            texture_specs: self.textures.clone(),
            path_specs: self
                .paths
                .iter()
                .filter_map(|p| match p {
                    PathSource::Spec(s) => Some(s.clone()),
                    PathSource::Csv { .. } => None,
                })
                .collect(),
            height_range_pct: opt.height_range_pct,
            windows_per_scenario: opt.windows_per_scenario,
            stride_ms: opt.stride_ms,
            master_seed: self.seed,
            metric: opt.metric,
            scenarios,
            scenario_count: opt.scenario_count,
            rejection_penalty: opt.rejection_penalty,
            rejection_allowance: opt.rejection_allowance,
            sensor: self.sensor,
            decoder: self.decoder,
        }
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn require_file(path: &Path, section: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("[{section}] file {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::PathProfile;

    const MINIMAL: &str = r#"
schema_version = 1

[[textures]]
kind = "bandlimited_noise"
low_cpm = 10.0
high_cpm = 250.0
seed = 1

[[paths]]
profile = "straight"
v = 0.2
duration_s = 3.0
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Standard);
        assert_eq!(cfg.stride_ms, 10);
        assert_eq!(cfg.masks, MaskSource::Params(GaborParams::FIXED));
        assert_eq!(cfg.sensor, SensorConfig::default());
        assert_eq!(cfg.textures[0].resolution_px, 1024);
        match &cfg.paths[0] {
            PathSource::Spec(s) => {
                assert_eq!(s.profile, PathProfile::Straight { v: 0.2 });
                assert_eq!(s.rate_hz, 1000.0);
            }
            other => panic!("parsed as {other:?}"),
        }
        assert_eq!(cfg.scenario_ids(), vec![0]);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.optimizer = Some(OptimizerConfig::default());
        cfg.heights.profile = HeightProfile::PerWindow {
            range_pct: 25.0,
            window_s: 1.0,
        };
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("schema_version = 1"));
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn mask_and_path_sources_parse_from_files() {
        let text = r#"
schema_version = 1
[masks]
file = "m.json"
[[textures]]
kind = "checker"
cell_m = 0.01
[[paths]]
csv = "path.csv"
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.masks, MaskSource::File { file: "m.json".into() });
        assert_eq!(cfg.paths[0], PathSource::Csv { csv: "path.csv".into() });
        // Missing files fail validation, naming the section.
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("[masks]"), "{err}");
    }

    #[test]
    fn files_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mask = rasterize(&GaborParams::FIXED, 33).unwrap();
        io::write_file(&dir.path().join("m.json"), io::mask_to_json(&mask, None)).unwrap();
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 1\noutput_dir = \"runs\"\n[masks]\nfile = \"m.json\"");
        let path = dir.path().join("exp.toml");
        io::write_file(&path, text).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("runs"));
        let (m, p) = cfg.masks.load(48).unwrap();
        assert_eq!(m.resolution(), 48);
        assert!(p.is_none());
    }

    #[test]
    fn schema_violations_are_rejected() {
        let bad = [
            MINIMAL.replace("schema_version = 1", "schema_version = 2"),
            MINIMAL.replace("schema_version = 1", "schema_version = 1\nbogus = 3"),
            MINIMAL.replace("schema_version = 1", "schema_version = 1\n[sensor]\nview_pix = 64"),
            MINIMAL.replace("v = 0.2", "v = \"fast\""),
        ];
        for text in &bad {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
        let invalid = [
            MINIMAL.replace("schema_version = 1", "schema_version = 1\nstride_ms = 0"),
            MINIMAL.replace("high_cpm = 250.0", "high_cpm = 5.0"),
            MINIMAL.replace("schema_version = 1", "schema_version = 1\nkind = \"mask_comparison\""),
            MINIMAL.replace("schema_version = 1", "schema_version = 1\n[sensor]\nh_nom_m = -1.0"),
            MINIMAL.replace(
                "schema_version = 1",
                "schema_version = 1\n[heights.profile]\nmode = \"per_window\"\nrange_pct = 150.0",
            ),
        ];
        for text in &invalid {
            let cfg = ExperimentConfig::from_toml(text).unwrap();
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn objective_inherits_experiment_settings() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.seed = 42;
        let opt = OptimizerConfig::default();
        let obj = cfg.objective(&opt, vec![3, 4]);
        assert_eq!(obj.master_seed, 42);
        assert_eq!(obj.scenarios, vec![3, 4]);
        assert_eq!(obj.path_specs.len(), 1);
        assert_eq!(obj.sensor, cfg.sensor);
    }
}

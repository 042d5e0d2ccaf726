//! Python bindings: textures, paths, masks, simulation, decoding,
//! dead reckoning and the experiment runner. Arrays cross the boundary
//! as plain lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use gabor_odo::config::ExperimentConfig;
use gabor_odo::decoder::{self, DecoderConfig};
use gabor_odo::experiment::{run_experiment as run_exp, RunOptions};
use gabor_odo::mask::{self, Channel};
use gabor_odo::odometry::{self, OdometryConfig};
use gabor_odo::sensor::{self, HeightProfile};
use gabor_odo::texture::{self, TextureKind, TextureSpec};
use gabor_odo::trajectory::{self, GyroModel, KinematicBounds, PathProfile};
use gabor_odo::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::File { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for gabor_odo::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Gabor mask parameters: carrier cycles across the aperture, envelope
/// width and amplitude.
#[pyclass(module = "gabor_odo_py", from_py_object)]
#[derive(Clone, Copy)]
struct GaborParams {
    inner: mask::GaborParams,
}

#[pymethods]
impl GaborParams {
    #[new]
    fn new(xi0: f64, sigma: f64, alpha: f64) -> PyResult<Self> {
        Ok(Self {
            inner: mask::GaborParams::new(xi0, sigma, alpha).py()?,
        })
    }

    /// The hand-picked baseline (6, 1, 1).
    #[staticmethod]
    fn fixed() -> Self {
        Self {
            inner: mask::GaborParams::FIXED,
        }
    }

    #[getter]
    fn xi0(&self) -> f64 {
        self.inner.xi0
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    /// The four non-negative mask grids keyed by channel name, row-major.
    fn rasterize(&self, resolution: usize) -> PyResult<Vec<(String, Vec<f64>)>> {
        let m = mask::rasterize(&self.inner, resolution).py()?;
        Ok(Channel::ALL
            .iter()
            .map(|&c| (c.name().to_string(), m.grid(c).to_vec()))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "GaborParams(xi0={}, sigma={}, alpha={})",
            self.inner.xi0, self.inner.sigma, self.inner.alpha
        )
    }
}

/// Sensor geometry and electronics.
#[pyclass(module = "gabor_odo_py", from_py_object)]
#[derive(Clone, Copy)]
struct SensorConfig {
    inner: sensor::SensorConfig,
}

#[pymethods]
impl SensorConfig {
    #[new]
    #[pyo3(signature = (view_px=128, h_nom_m=0.06, read_noise_v=None, gain=None))]
    fn new(view_px: usize, h_nom_m: f64, read_noise_v: Option<f64>, gain: Option<f64>) -> PyResult<Self> {
        let d = sensor::SensorConfig::default();
        let inner = sensor::SensorConfig {
            view_px,
            h_nom_m,
            read_noise_v: read_noise_v.unwrap_or(d.read_noise_v),
            // Keep the signal voltage independent of the view resolution.
            gain: gain.unwrap_or(d.gain * (d.view_px as f64 / view_px as f64).powi(2)),
            ..d
        };
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn view_px(&self) -> usize {
        self.inner.view_px
    }

    #[getter]
    fn h_nom_m(&self) -> f64 {
        self.inner.h_nom_m
    }

    #[getter]
    fn gain(&self) -> f64 {
        self.inner.gain
    }

    /// Ground width seen by one detector at height `h_m`.
    fn footprint(&self, h_m: f64) -> f64 {
        sensor::footprint(&self.inner, h_m)
    }

    /// Carrier frequency on the ground, cycles per meter.
    #[pyo3(signature = (xi0, h_m=None))]
    fn ground_frequency(&self, xi0: f64, h_m: Option<f64>) -> f64 {
        self.inner.ground_frequency(xi0, h_m.unwrap_or(self.inner.h_nom_m))
    }
}

#[pyclass(module = "gabor_odo_py", skip_from_py_object)]
struct Texture {
    inner: texture::TextureField,
}

fn make_texture(kind: TextureKind, resolution: usize, extent_m: f64) -> PyResult<Texture> {
    Ok(Texture {
        inner: texture::generate(&TextureSpec::new(kind, resolution, extent_m)).py()?,
    })
}

#[pymethods]
impl Texture {
    /// White noise band-passed to `[low_cpm, high_cpm]` cycles per meter.
    #[staticmethod]
    #[pyo3(signature = (low_cpm, high_cpm, seed=0, resolution=1024, extent_m=1.0))]
    fn bandlimited(low_cpm: f64, high_cpm: f64, seed: u64, resolution: usize, extent_m: f64) -> PyResult<Self> {
        make_texture(TextureKind::BandlimitedNoise { low_cpm, high_cpm, seed }, resolution, extent_m)
    }

    #[staticmethod]
    #[pyo3(signature = (freq_cpm, angle_rad=0.0, resolution=1024, extent_m=1.0))]
    fn sinusoid(freq_cpm: f64, angle_rad: f64, resolution: usize, extent_m: f64) -> PyResult<Self> {
        make_texture(TextureKind::Sinusoid { freq_cpm, angle_rad }, resolution, extent_m)
    }

    #[staticmethod]
    #[pyo3(signature = (cell_m, resolution=1024, extent_m=1.0))]
    fn checker(cell_m: f64, resolution: usize, extent_m: f64) -> PyResult<Self> {
        make_texture(TextureKind::Checker { cell_m }, resolution, extent_m)
    }

    /// PGM or PNG image stretched over `extent_m`.
    #[staticmethod]
    #[pyo3(signature = (path, extent_m=1.0))]
    fn load(path: PathBuf, extent_m: f64) -> PyResult<Self> {
        Ok(Self {
            inner: texture::load_image(path, [extent_m, extent_m]).py()?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    /// Row-major reflectance values in [0, 1].
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Bilinear reflectance at a ground point.
    fn sample(&self, x_m: f64, y_m: f64) -> f64 {
        self.inner.sample(x_m, y_m)
    }
}

/// Planar path sampled on a uniform clock.
#[pyclass(module = "gabor_odo_py", from_py_object)]
#[derive(Clone)]
struct Path {
    inner: trajectory::PlanarPath,
}

fn make_path(profile: PathProfile, duration_s: f64, rate_hz: f64, v_max: f64) -> PyResult<Path> {
    let bounds = KinematicBounds {
        v_max,
        ..Default::default()
    };
    Ok(Path {
        inner: trajectory::generate_path(&profile, duration_s, rate_hz, bounds).py()?,
    })
}

#[pymethods]
impl Path {
    #[staticmethod]
    #[pyo3(signature = (v, duration_s, rate_hz=1000.0))]
    fn straight(v: f64, duration_s: f64, rate_hz: f64) -> PyResult<Self> {
        make_path(PathProfile::Straight { v }, duration_s, rate_hz, v.abs().max(0.4))
    }

    #[staticmethod]
    #[pyo3(signature = (v, omega, duration_s, rate_hz=1000.0))]
    fn arc(v: f64, omega: f64, duration_s: f64, rate_hz: f64) -> PyResult<Self> {
        make_path(PathProfile::Arc { v, omega }, duration_s, rate_hz, v.abs().max(0.4))
    }

    /// Smooth random course with speed in `[v_min, v_max]`.
    #[staticmethod]
    #[pyo3(signature = (v_min, v_max, omega_max, duration_s, seed=0, rate_hz=1000.0))]
    fn random_waypoints(v_min: f64, v_max: f64, omega_max: f64, duration_s: f64, seed: u64, rate_hz: f64) -> PyResult<Self> {
        let profile = PathProfile::RandomWaypoints {
            v_min,
            v_max,
            omega_max,
            knot_interval_s: 2.0,
            seed,
        };
        make_path(profile, duration_s, rate_hz, v_max)
    }

    /// Path from columns; rates are reconstructed when omitted.
    #[staticmethod]
    #[pyo3(signature = (t, x, y, yaw))]
    fn from_poses(t: Vec<f64>, x: Vec<f64>, y: Vec<f64>, yaw: Vec<f64>) -> PyResult<Self> {
        let n = t.len();
        let mut inner = trajectory::PlanarPath {
            t,
            x,
            y,
            yaw,
            v_x: vec![0.0; n],
            omega_z: vec![0.0; n],
        };
        inner.check_lengths().py()?;
        trajectory::reconstruct_rates(&mut inner).py()?;
        Ok(Self { inner })
    }

    fn resample(&self, rate_hz: f64) -> PyResult<Self> {
        Ok(Self {
            inner: trajectory::resample(&self.inner, rate_hz).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        self.inner.t.clone()
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    #[getter]
    fn yaw(&self) -> Vec<f64> {
        self.inner.yaw.clone()
    }

    #[getter]
    fn v_x(&self) -> Vec<f64> {
        self.inner.v_x.clone()
    }

    #[getter]
    fn omega_z(&self) -> Vec<f64> {
        self.inner.omega_z.clone()
    }

    fn length(&self) -> f64 {
        self.inner.length()
    }

    fn endpoint(&self) -> Option<(f64, f64)> {
        self.inner.endpoint()
    }

    /// Simulated gyroscope yaw rate along the path.
    #[pyo3(signature = (noise_std=0.0, bias=0.0, seed=0))]
    fn gyro(&self, noise_std: f64, bias: f64, seed: u64) -> PyResult<Vec<f64>> {
        let model = GyroModel {
            noise_std,
            bias,
            bias_walk_std: 0.0,
            seed,
        };
        trajectory::gyro_measure(&self.inner, &model).py()
    }
}

/// Differential signal pair on the 1 kHz clock.
#[pyclass(module = "gabor_odo_py", skip_from_py_object)]
struct Signal {
    inner: sensor::SignalTrace,
    raw: sensor::FourChannelTrace,
}

#[pymethods]
impl Signal {
    #[new]
    fn new(t: Vec<f64>, s_cos: Vec<f64>, s_sin: Vec<f64>) -> PyResult<Self> {
        if s_cos.len() != t.len() || s_sin.len() != t.len() {
            return Err(PyValueError::new_err("t, s_cos and s_sin must have equal length"));
        }
        Ok(Self {
            inner: sensor::SignalTrace { t, s_cos, s_sin },
            raw: sensor::FourChannelTrace::default(),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        self.inner.t.clone()
    }

    #[getter]
    fn s_cos(&self) -> Vec<f64> {
        self.inner.s_cos.clone()
    }

    #[getter]
    fn s_sin(&self) -> Vec<f64> {
        self.inner.s_sin.clone()
    }

    /// Detector voltages keyed by channel name (empty for user-built signals).
    fn channels(&self) -> Vec<(String, Vec<f64>)> {
        if self.raw.is_empty() {
            return Vec::new();
        }
        Channel::ALL
            .iter()
            .map(|&c| (c.name().to_string(), self.raw.channel(c).to_vec()))
            .collect()
    }
}

#[pyclass(module = "gabor_odo_py", from_py_object)]
#[derive(Clone, Copy)]
struct SpeedEstimate {
    inner: decoder::SpeedEstimate,
}

#[pymethods]
impl SpeedEstimate {
    #[getter]
    fn t_s(&self) -> f64 {
        self.inner.t_s
    }

    #[getter]
    fn v_hat(&self) -> f64 {
        self.inner.v_hat
    }

    #[getter]
    fn confidence(&self) -> f64 {
        self.inner.confidence
    }

    #[getter]
    fn f_peak_hz(&self) -> f64 {
        self.inner.f_peak_hz
    }

    #[getter]
    fn accepted(&self) -> bool {
        self.inner.accepted
    }

    fn __repr__(&self) -> String {
        let e = &self.inner;
        format!(
            "SpeedEstimate(t_s={}, v_hat={:.5}, confidence={:.3}, accepted={})",
            e.t_s, e.v_hat, e.confidence, e.accepted
        )
    }
}

/// Simulates the sensor along `path` (1 kHz). Heights are redrawn every
/// second within `+-height_range_pct` percent of nominal.
#[pyfunction]
#[pyo3(signature = (texture, params, path, sensor=None, seed=0, height_range_pct=0.0))]
fn simulate(
    texture: &Texture,
    params: &GaborParams,
    path: &Path,
    sensor: Option<SensorConfig>,
    seed: u64,
    height_range_pct: f64,
) -> PyResult<Signal> {
    let cfg = sensor.map(|s| s.inner).unwrap_or_default();
    let masks = mask::rasterize(&params.inner, cfg.view_px).py()?;
    let profile = if height_range_pct == 0.0 {
        HeightProfile::Nominal
    } else {
        HeightProfile::PerWindow {
            range_pct: height_range_pct,
            window_s: 1.0,
        }
    };
    let (raw, inner) = sensor::simulate(&texture.inner, &masks, &cfg, &path.inner, &profile, seed).py()?;
    Ok(Signal { inner, raw })
}

/// Decodes one window of the quadrature pair.
#[pyfunction]
fn decode_window(s_cos: Vec<f64>, s_sin: Vec<f64>, xi_ground: f64) -> PyResult<SpeedEstimate> {
    let cfg = DecoderConfig {
        window_len: s_cos.len(),
        ..Default::default()
    };
    Ok(SpeedEstimate {
        inner: decoder::decode_window(&s_cos, &s_sin, xi_ground, &cfg).py()?,
    })
}

/// Sliding-window decoding. With `all_windows`, rejected windows are kept
/// and no median filter is applied.
#[pyfunction]
#[pyo3(signature = (signal, xi_ground, stride_ms=10, all_windows=false))]
fn decode(signal: &Signal, xi_ground: f64, stride_ms: u32, all_windows: bool) -> PyResult<Vec<SpeedEstimate>> {
    let cfg = DecoderConfig::default();
    let est = if all_windows {
        decoder::decode_windows(&signal.inner, stride_ms, xi_ground, &cfg)
    } else {
        decoder::decode_stream(&signal.inner, stride_ms, xi_ground, &cfg)
    }
    .py()?;
    Ok(est.into_iter().map(|inner| SpeedEstimate { inner }).collect())
}

/// Dead reckoning from speed estimates and 1 kHz yaw rate.
#[pyfunction]
fn integrate(estimates: Vec<SpeedEstimate>, t: Vec<f64>, omega: Vec<f64>) -> PyResult<Path> {
    let est: Vec<decoder::SpeedEstimate> = estimates.iter().map(|e| e.inner).collect();
    Ok(Path {
        inner: odometry::integrate(&est, &t, &omega, &OdometryConfig::default()).py()?,
    })
}

/// Root-mean-square position error against `reference`.
#[pyfunction]
fn ate(estimate: &Path, reference: &Path) -> PyResult<f64> {
    odometry::ate(&estimate.inner, &reference.inner).py()
}

/// Endpoint error as a percentage of the reference length.
#[pyfunction]
fn drift(estimate: &Path, reference: &Path) -> PyResult<f64> {
    odometry::drift(&estimate.inner, &reference.inner).py()
}

/// Runs an experiment config and returns the per-group summary rows.
#[pyfunction]
#[pyo3(signature = (config, out=None, seed=None, jobs=0))]
fn run_experiment(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    jobs: usize,
) -> PyResult<Vec<(String, f64, f64, f64, f64)>> {
    let mut cfg = ExperimentConfig::load(&config).py()?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let outcome = py
        .detach(|| {
            run_exp(
                &cfg,
                RunOptions {
                    jobs,
                    write_traces: true,
                },
            )
        })
        .py()?;
    Ok(outcome
        .groups
        .into_iter()
        .map(|g| (g.group, g.rmse_mps, g.mae_mps, g.mean_ate_m, g.mean_drift_pct))
        .collect())
}

#[pymodule]
fn gabor_odo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GaborParams>()?;
    m.add_class::<SensorConfig>()?;
    m.add_class::<Texture>()?;
    m.add_class::<Path>()?;
    m.add_class::<Signal>()?;
    m.add_class::<SpeedEstimate>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(decode_window, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(ate, m)?)?;
    m.add_function(wrap_pyfunction!(drift, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

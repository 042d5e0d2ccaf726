//! Detector rendering and the optical/electronic signal chain.
//!
//! Each detector sees a square ground window of side
//! `footprint(h) = 2 h tan(fov / 2)`. The window is resampled into a
//! `view_px x view_px` image whose columns run *backwards* along the
//! sensor's forward axis and whose rows run along its left (+y) axis, so
//! that forward motion produces a positive frequency in `s_cos + i s_sin`.
//!
//! The per-detector output is
//! `sum_u (view * b)(u) D(u) Omega(u) M_k(u)`, followed by gain, read
//! noise, quantization and clipping. Because the chain is linear up to
//! the electronics, [`DetectorKernels`] folds blur, falloff and mask into
//! one weight image per channel; the explicit chain in
//! [`integrate_detector`] is kept as the reference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{pixel_center, Channel, MaskRaster};
use crate::rng;
use crate::texture::TextureField;
use crate::trajectory::PlanarPath;

/// Simulation clock.
pub const SIM_RATE_HZ: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    /// Pitch between adjacent detectors of the 2x2 grid.
    pub d_m: f64,
    pub fov_rad: f64,
    pub h_nom_m: f64,
    pub view_px: usize,
    /// Volts per unit of integrated (view x mask) signal.
    pub gain: f64,
    pub read_noise_v: f64,
    pub adc_bits: u32,
    pub v_clip: f64,
    pub blur_sigma_px: f64,
    pub falloff_exp_d: f64,
    pub falloff_exp_omega: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            d_m: 0.019,
            fov_rad: 70f64.to_radians(),
            h_nom_m: 0.06,
            view_px: 128,
            gain: 1.22e-4,
            read_noise_v: 175e-6,
            adc_bits: 12,
            v_clip: 3.2,
            blur_sigma_px: 1.5,
            falloff_exp_d: 1.0,
            falloff_exp_omega: 3.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_m", self.d_m),
            ("h_nom_m", self.h_nom_m),
            ("gain", self.gain),
            ("v_clip", self.v_clip),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("{v} must be > 0")));
            }
        }
        if !(self.fov_rad > 0.0 && self.fov_rad < std::f64::consts::PI) {
            return Err(Error::invalid("fov_rad", format!("{} outside (0, pi)", self.fov_rad)));
        }
        if !(8..=16).contains(&self.adc_bits) {
            return Err(Error::invalid("adc_bits", format!("{} outside [8, 16]", self.adc_bits)));
        }
        if self.view_px < 32 {
            return Err(Error::invalid("view_px", format!("{} < 32", self.view_px)));
        }
        for (name, v) in [
            ("read_noise_v", self.read_noise_v),
            ("blur_sigma_px", self.blur_sigma_px),
            ("falloff_exp_d", self.falloff_exp_d),
            ("falloff_exp_omega", self.falloff_exp_omega),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("{v} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Ground spatial frequency of the mask carrier at height `h`, in cycles per meter.
    pub fn ground_frequency(&self, xi0: f64, h_m: f64) -> f64 {
        xi0 / footprint(self, h_m)
    }

    /// Noise-free copy (read noise off; quantization stays).
    pub fn noiseless(mut self) -> Self {
        self.read_noise_v = 0.0;
        self
    }

    fn quant_step(&self) -> f64 {
        self.v_clip / ((1u64 << self.adc_bits) - 1) as f64
    }
}

/// Ground width covered by one detector view at height `h`.
pub fn footprint(cfg: &SensorConfig, h_m: f64) -> f64 {
    2.0 * h_m * (cfg.fov_rad / 2.0).tan()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Square ground window seen by one detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorWindow {
    pub center: [f64; 2],
    pub extent_m: f64,
    pub yaw: f64,
}

/// Detector position in the sensor frame (x forward, y left). Plus masks
/// sit in front of minus masks; the cosine pair is on the left, the sine
/// pair on the right. Off-nominal parallax then moves the cosine and sine
/// views apart only across the direction of travel, so it scales both
/// channels alike instead of skewing their quadrature phase.
pub fn detector_offset(cfg: &SensorConfig, channel: Channel) -> [f64; 2] {
    let h = cfg.d_m / 2.0;
    match channel {
        Channel::CosPlus => [h, h],
        Channel::CosMinus => [-h, h],
        Channel::SinPlus => [h, -h],
        Channel::SinMinus => [-h, -h],
    }
}

/// Window of detector `channel` at height `h`. The masks are aligned so
/// that all windows coincide at `h_nom`; off-nominal heights shift each
/// center by `p_k (1 - h / h_nom)` relative to the sensor origin.
pub fn detector_window(
    cfg: &SensorConfig,
    h_m: f64,
    pose: Pose,
    channel: Channel,
) -> Result<DetectorWindow> {
    if !(h_m > 0.0 && h_m.is_finite()) {
        return Err(Error::invalid("height", format!("{h_m} must be > 0")));
    }
    let p = detector_offset(cfg, channel);
    let k = 1.0 - h_m / cfg.h_nom_m;
    let (ox, oy) = (p[0] * k, p[1] * k);
    let (s, c) = pose.yaw.sin_cos();
    Ok(DetectorWindow {
        center: [pose.x + c * ox - s * oy, pose.y + s * ox + c * oy],
        extent_m: footprint(cfg, h_m),
        yaw: pose.yaw,
    })
}

/// Affine map from view pixel `(row, col)` to fractional texture grid
/// coordinates: `g = base + col * dcol + row * drow`.
#[derive(Clone, Copy)]
struct ViewMap {
    base: [f64; 2],
    dcol: [f64; 2],
    drow: [f64; 2],
}

impl ViewMap {
    fn new(field: &TextureField, window: &DetectorWindow, n: usize) -> Self {
        let (dx, dy) = field.spacing();
        let half = window.extent_m / 2.0;
        let (s, c) = window.yaw.sin_cos();
        let a0 = pixel_center(0, n);
        let step = 2.0 / n as f64;
        // Sensor-frame offset of pixel (row, col): (-a_col * half, b_row * half).
        let ground = |xs: f64, ys: f64| [(c * xs - s * ys) / dx, (s * xs + c * ys) / dy];
        let origin = ground(-a0 * half, a0 * half);
        let col = ground(-step * half, 0.0);
        let row = ground(0.0, step * half);
        Self {
            base: [
                window.center[0] / dx + origin[0],
                window.center[1] / dy + origin[1],
            ],
            dcol: col,
            drow: row,
        }
    }

    #[inline]
    fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let (r, c) = (row as f64, col as f64);
        (
            self.base[0] + c * self.dcol[0] + r * self.drow[0],
            self.base[1] + c * self.dcol[1] + r * self.drow[1],
        )
    }
}

/// Resamples the texture inside `window` into a `view_px x view_px` image.
pub fn render_view(field: &TextureField, window: &DetectorWindow, view_px: usize) -> Vec<f64> {
    let map = ViewMap::new(field, window, view_px);
    let mut out = Vec::with_capacity(view_px * view_px);
    for r in 0..view_px {
        for c in 0..view_px {
            let (gx, gy) = map.at(r, c);
            out.push(field.sample_grid(gx, gy));
        }
    }
    out
}

/// Inner products of the rendered window with each kernel, without
/// materializing the view.
fn project_view(
    field: &TextureField,
    window: &DetectorWindow,
    view_px: usize,
    kernels: &[&[f64]],
    out: &mut [f64],
) {
    let map = ViewMap::new(field, window, view_px);
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut acc = [0.0f64; 4];
    let corners = [map.at(0, 0), map.at(0, view_px - 1), map.at(view_px - 1, 0), map.at(view_px - 1, view_px - 1)];
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in corners {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some((sx, sy)) = field.interior_offset(x0, x1, y0, y1) {
        for r in 0..view_px {
            let row = r * view_px..(r + 1) * view_px;
            let (gx0, gy0) = map.at(r, 0);
            let (gx0, gy0) = (gx0 + sx, gy0 + sy);
            let sample = |c: usize| {
                let c = c as f64;
                field.sample_interior(gx0 + c * map.dcol[0], gy0 + c * map.dcol[1])
            };
            match kernels {
                [k0, k1, k2, k3] => {
                    let (k0, k1, k2, k3) = (&k0[row.clone()], &k1[row.clone()], &k2[row.clone()], &k3[row]);
                    for c in 0..view_px {
                        let v = sample(c);
                        acc[0] += v * k0[c];
                        acc[1] += v * k1[c];
                        acc[2] += v * k2[c];
                        acc[3] += v * k3[c];
                    }
                }
                _ => {
                    for (a, k) in acc.iter_mut().zip(kernels) {
                        let k = &k[row.clone()];
                        for (c, w) in k.iter().enumerate() {
                            *a += sample(c) * w;
                        }
                    }
                }
            }
        }
        out.copy_from_slice(&acc[..out.len()]);
        return;
    }
    for r in 0..view_px {
        let row = r * view_px;
        for c in 0..view_px {
            let (gx, gy) = map.at(r, c);
            let v = field.sample_grid(gx, gy);
            for (a, k) in acc.iter_mut().zip(kernels) {
                *a += v * k[row + c];
            }
        }
    }
    out.copy_from_slice(&acc[..out.len()]);
}

/// Combined detector directional response and foreshortening,
/// `cos^(e_D + e_Omega)(beta)` with `beta` the off-nadir ray angle.
pub fn falloff_weights(cfg: &SensorConfig, view_px: usize) -> Vec<f64> {
    let t = (cfg.fov_rad / 2.0).tan();
    let e = cfg.falloff_exp_d + cfg.falloff_exp_omega;
    let mut out = Vec::with_capacity(view_px * view_px);
    for r in 0..view_px {
        let b = pixel_center(r, view_px);
        for c in 0..view_px {
            let a = pixel_center(c, view_px);
            let tan_beta = a.hypot(b) * t;
            let cos_beta = 1.0 / (1.0 + tan_beta * tan_beta).sqrt();
            out.push(if e == 0.0 { 1.0 } else { cos_beta.powf(e) });
        }
    }
    out
}

/// Truncated Gaussian blur, renormalized at the borders.
#[derive(Debug, Clone)]
pub struct GaussianBlur {
    kernel: Vec<f64>,
    radius: usize,
    inv_norm: Vec<f64>,
}

impl GaussianBlur {
    pub fn new(sigma_px: f64, n: usize) -> Self {
        if sigma_px <= 0.0 {
            return Self {
                kernel: vec![1.0],
                radius: 0,
                inv_norm: vec![1.0; n],
            };
        }
        let radius = (3.0 * sigma_px).ceil() as usize;
        let kernel: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let m = i as f64 - radius as f64;
                (-m * m / (2.0 * sigma_px * sigma_px)).exp()
            })
            .collect();
        let inv_norm = (0..n)
            .map(|i| {
                let lo = radius.saturating_sub(i);
                let hi = (radius + n - 1 - i).min(2 * radius);
                1.0 / kernel[lo..=hi].iter().sum::<f64>()
            })
            .collect();
        Self {
            kernel,
            radius,
            inv_norm,
        }
    }

    /// Unnormalized correlation of one strided line with the kernel.
    fn correlate(&self, src: &[f64], dst: &mut [f64]) {
        let n = src.len();
        let r = self.radius as isize;
        for (i, d) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in self.kernel.iter().enumerate() {
                let j = i as isize + k as isize - r;
                if j >= 0 && (j as usize) < n {
                    acc += w * src[j as usize];
                }
            }
            *d = acc;
        }
    }

    fn apply_line(&self, line: &mut [f64], scratch: &mut [f64], transpose: bool) {
        if transpose {
            for (v, s) in line.iter_mut().zip(&self.inv_norm) {
                *v *= s;
            }
            self.correlate(line, scratch);
            line.copy_from_slice(scratch);
        } else {
            self.correlate(line, scratch);
            for ((v, s), n) in line.iter_mut().zip(scratch.iter()).zip(&self.inv_norm) {
                *v = s * n;
            }
        }
    }

    fn apply_2d(&self, img: &mut [f64], n: usize, transpose: bool) {
        if self.radius == 0 {
            return;
        }
        let mut line = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for row in img.chunks_exact_mut(n) {
            self.apply_line(row, &mut scratch, transpose);
        }
        for c in 0..n {
            for r in 0..n {
                line[r] = img[r * n + c];
            }
            self.apply_line(&mut line, &mut scratch, transpose);
            for r in 0..n {
                img[r * n + c] = line[r];
            }
        }
    }

    pub fn apply(&self, img: &mut [f64], n: usize) {
        self.apply_2d(img, n, false);
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn apply_transpose(&self, img: &mut [f64], n: usize) {
        self.apply_2d(img, n, true);
    }
}

/// Explicit optical chain for one detector: blur the view, weight by the
/// falloff, multiply by the mask, sum.
pub fn integrate_detector(view: &[f64], mask: &[f64], cfg: &SensorConfig) -> Result<f64> {
    if view.len() != mask.len() {
        return Err(Error::LengthMismatch {
            what: "detector view vs mask",
            expected: mask.len(),
            actual: view.len(),
        });
    }
    let n = (view.len() as f64).sqrt().round() as usize;
    if n * n != view.len() {
        return Err(Error::invalid("view", format!("{} pixels is not square", view.len())));
    }
    let mut blurred = view.to_vec();
    GaussianBlur::new(cfg.blur_sigma_px, n).apply(&mut blurred, n);
    let falloff = falloff_weights(cfg, n);
    Ok(blurred
        .iter()
        .zip(&falloff)
        .zip(mask)
        .map(|((v, w), m)| v * w * m)
        .sum())
}

/// Per-channel weight images `B^T (D Omega M_k)` so that the detector
/// output is a plain inner product with the unblurred view.
#[derive(Debug, Clone)]
pub struct DetectorKernels {
    view_px: usize,
    kernels: [Vec<f64>; 4],
}

impl DetectorKernels {
    pub fn new(masks: &MaskRaster, cfg: &SensorConfig) -> Result<Self> {
        let n = cfg.view_px;
        if masks.resolution() != n {
            return Err(Error::LengthMismatch {
                what: "mask resolution vs view_px",
                expected: n,
                actual: masks.resolution(),
            });
        }
        let falloff = falloff_weights(cfg, n);
        let blur = GaussianBlur::new(cfg.blur_sigma_px, n);
        let kernels = masks.grids().clone().map(|g| {
            let mut k: Vec<f64> = g.iter().zip(&falloff).map(|(m, w)| m * w).collect();
            blur.apply_transpose(&mut k, n);
            k
        });
        Ok(Self { view_px: n, kernels })
    }

    pub fn kernel(&self, channel: Channel) -> &[f64] {
        &self.kernels[channel.index()]
    }

    pub fn integrate(&self, view: &[f64], channel: Channel) -> f64 {
        view.iter().zip(self.kernel(channel)).map(|(v, k)| v * k).sum()
    }
}

/// Gain, read noise, quantization to `2^bits` levels over `[0, v_clip]`, clip.
pub fn electronics(raw: f64, cfg: &SensorConfig, rng: &mut impl Rng) -> f64 {
    let mut v = raw * cfg.gain;
    if cfg.read_noise_v > 0.0 {
        v += cfg.read_noise_v * rng.sample::<f64, _>(StandardNormal);
    }
    quantize(v, cfg).clamp(0.0, cfg.v_clip)
}

pub fn quantize(v: f64, cfg: &SensorConfig) -> f64 {
    let step = cfg.quant_step();
    (v / step).round() * step
}

/// Raw voltages of the four detectors on a uniform 1 kHz clock.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FourChannelTrace {
    pub t: Vec<f64>,
    pub channels: [Vec<f64>; 4],
}

impl FourChannelTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        &self.channels[channel.index()]
    }

    /// Differential pair `s_cos = cos+ - cos-`, `s_sin = sin+ - sin-`.
    pub fn differential(&self) -> SignalTrace {
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, m)| p - m).collect();
        SignalTrace {
            t: self.t.clone(),
            s_cos: diff(&self.channels[0], &self.channels[1]),
            s_sin: diff(&self.channels[2], &self.channels[3]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalTrace {
    pub t: Vec<f64>,
    pub s_cos: Vec<f64>,
    pub s_sin: Vec<f64>,
}

impl SignalTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Sensor height over time, `h = h_nom (1 + delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeightProfile {
    #[default]
    Nominal,
    Constant {
        h_m: f64,
    },
    /// `delta` uniform in `+-range_pct` percent, redrawn every `window_s`.
    PerWindow {
        range_pct: f64,
        #[serde(default = "default_window_s")]
        window_s: f64,
    },
    /// One `delta` for the whole trajectory.
    PerTrajectory {
        range_pct: f64,
    },
    /// Smooth random `delta` through knots every `1 / cutoff_hz` seconds.
    Continuous {
        range_pct: f64,
        cutoff_hz: f64,
    },
}

fn default_window_s() -> f64 {
    1.0
}

impl HeightProfile {
    pub fn range_pct(&self) -> f64 {
        match self {
            HeightProfile::PerWindow { range_pct, .. }
            | HeightProfile::PerTrajectory { range_pct }
            | HeightProfile::Continuous { range_pct, .. } => *range_pct,
            _ => 0.0,
        }
    }

    /// Heights for `n` samples at interval `dt`.
    pub fn series(&self, cfg: &SensorConfig, n: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
        let h0 = cfg.h_nom_m;
        let mut rng = rng::stream(seed, rng::tag::HEIGHT, 0);
        let mut draw = |range_pct: f64| -> f64 {
            let r = range_pct / 100.0;
            if r == 0.0 {
                0.0
            } else {
                rng.random_range(-r..=r)
            }
        };
        let check_range = |r: f64| -> Result<()> {
            if (0.0..100.0).contains(&r) {
                Ok(())
            } else {
                Err(Error::invalid("height range_pct", format!("{r} outside [0, 100)")))
            }
        };
        Ok(match *self {
            HeightProfile::Nominal => vec![h0; n],
            HeightProfile::Constant { h_m } => {
                if !(h_m > 0.0) {
                    return Err(Error::invalid("height", h_m.to_string()));
                }
                vec![h_m; n]
            }
            HeightProfile::PerTrajectory { range_pct } => {
                check_range(range_pct)?;
                vec![h0 * (1.0 + draw(range_pct)); n]
            }
            HeightProfile::PerWindow { range_pct, window_s } => {
                check_range(range_pct)?;
                if !(window_s > 0.0) {
                    return Err(Error::invalid("window_s", window_s.to_string()));
                }
                let per = ((window_s / dt).round() as usize).max(1);
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    let h = h0 * (1.0 + draw(range_pct));
                    let take = per.min(n - out.len());
                    out.extend(std::iter::repeat_n(h, take));
                }
                out
            }
            HeightProfile::Continuous { range_pct, cutoff_hz } => {
                check_range(range_pct)?;
                if !(cutoff_hz > 0.0) {
                    return Err(Error::invalid("cutoff_hz", cutoff_hz.to_string()));
                }
                let knot_dt = 1.0 / cutoff_hz;
                let knots_needed = ((n as f64 * dt) / knot_dt).ceil() as usize + 2;
                let knots: Vec<f64> = (0..knots_needed).map(|_| draw(range_pct)).collect();
                (0..n)
                    .map(|i| {
                        let s = i as f64 * dt / knot_dt;
                        let k = s.floor() as usize;
                        let f = s - k as f64;
                        let blend = 0.5 * (1.0 - (std::f64::consts::PI * f).cos());
                        h0 * (1.0 + knots[k] + (knots[k + 1] - knots[k]) * blend)
                    })
                    .collect()
            }
        })
    }
}

/// Simulates the four detector voltages along `path` (1 kHz) with heights
/// drawn from `profile`. Masks are resampled to `view_px` if needed.
pub fn simulate(
    field: &TextureField,
    masks: &MaskRaster,
    cfg: &SensorConfig,
    path: &PlanarPath,
    profile: &HeightProfile,
    seed: u64,
) -> Result<(FourChannelTrace, SignalTrace)> {
    check_sim_path(path)?;
    let heights = profile.series(cfg, path.len(), 1.0 / SIM_RATE_HZ, seed)?;
    let masks = masks.resampled(cfg.view_px);
    let kernels = DetectorKernels::new(&masks, cfg)?;
    simulate_with_kernels(field, &kernels, cfg, path, &heights, seed)
}

fn check_sim_path(path: &PlanarPath) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    path.check_lengths()?;
    if path.len() > 1 {
        let dt = path.uniform_dt()?;
        if (dt * SIM_RATE_HZ - 1.0).abs() > 1e-6 {
            return Err(Error::Timestamps("sampled at 1 kHz (resample the path first)"));
        }
    }
    Ok(())
}

/// Noise-free detector sums (before electronics) for every sample.
pub fn raw_signals(
    field: &TextureField,
    kernels: &DetectorKernels,
    cfg: &SensorConfig,
    path: &PlanarPath,
    heights: &[f64],
) -> Result<[Vec<f64>; 4]> {
    cfg.validate()?;
    if heights.len() != path.len() {
        return Err(Error::LengthMismatch {
            what: "height series",
            expected: path.len(),
            actual: heights.len(),
        });
    }
    let n = kernels.view_px;
    let all: Vec<&[f64]> = Channel::ALL.iter().map(|&c| kernels.kernel(c)).collect();
    let sums: Vec<[f64; 4]> = (0..path.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| -> Result<[f64; 4]> {
            let pose = Pose {
                x: path.x[i],
                y: path.y[i],
                yaw: path.yaw[i],
            };
            let h = heights[i];
            let mut buf = [0.0; 4];
            if h == cfg.h_nom_m {
                let w = detector_window(cfg, h, pose, Channel::CosPlus)?;
                project_view(field, &w, n, &all, &mut buf);
            } else {
                for ch in Channel::ALL {
                    let k = ch.index();
                    let w = detector_window(cfg, h, pose, ch)?;
                    project_view(field, &w, n, &all[k..k + 1], &mut buf[k..k + 1]);
                }
            }
            Ok(buf)
        })
        .collect::<Result<_>>()?;
    let mut raw: [Vec<f64>; 4] = Default::default();
    for (k, r) in raw.iter_mut().enumerate() {
        *r = sums.iter().map(|b| b[k]).collect();
    }
    Ok(raw)
}

/// [`simulate`] with prepared kernels and an explicit height series.
pub fn simulate_with_kernels(
    field: &TextureField,
    kernels: &DetectorKernels,
    cfg: &SensorConfig,
    path: &PlanarPath,
    heights: &[f64],
    seed: u64,
) -> Result<(FourChannelTrace, SignalTrace)> {
    check_sim_path(path)?;
    let raw = raw_signals(field, kernels, cfg, path, heights)?;
    let four = apply_electronics(&path.t, &raw, cfg, seed);
    let diff = four.differential();
    Ok((four, diff))
}

/// Runs the electronics over raw sums with the seed's noise stream. Draw
/// order is sample-major, channel-minor.
pub fn apply_electronics(
    t: &[f64],
    raw: &[Vec<f64>; 4],
    cfg: &SensorConfig,
    seed: u64,
) -> FourChannelTrace {
    let mut rng: ChaCha8Rng = rng::stream(seed, rng::tag::ELECTRONICS, 0);
    let mut channels: [Vec<f64>; 4] = Default::default();
    channels.iter_mut().for_each(|c| c.reserve(t.len()));
    for i in 0..t.len() {
        for (out, r) in channels.iter_mut().zip(raw) {
            out.push(electronics(r[i], cfg, &mut rng));
        }
    }
    FourChannelTrace {
        t: t.to_vec(),
        channels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{rasterize, GaborParams};
    use crate::texture::{generate, TextureKind, TextureSpec, WrapMode};
    use crate::trajectory::{generate_path, KinematicBounds, PathProfile};
    use rand::SeedableRng;

    fn cfg() -> SensorConfig {
        SensorConfig::default()
    }

    #[test]
    fn footprint_values() {
        assert!((footprint(&cfg(), 0.06) - 0.084_024_905).abs() < 1e-8);
        assert!((footprint(&cfg(), 0.20) - 0.280_083_015).abs() < 1e-8);
        let narrow = SensorConfig {
            fov_rad: 1e-9,
            ..cfg()
        };
        assert!(footprint(&narrow, 0.06) < 1e-9);
    }

    #[test]
    fn windows_coincide_at_nominal_height() {
        let c = cfg();
        let pose = Pose {
            x: 0.3,
            y: -0.2,
            yaw: 0.7,
        };
        let w0 = detector_window(&c, c.h_nom_m, pose, Channel::CosPlus).unwrap();
        for ch in Channel::ALL {
            assert_eq!(detector_window(&c, c.h_nom_m, pose, ch).unwrap(), w0);
        }
        assert_eq!(w0.center, [0.3, -0.2]);
    }

    #[test]
    fn parallax_offsets() {
        let c = cfg();
        let w = detector_window(&c, 2.0 * c.h_nom_m, Pose::default(), Channel::CosPlus).unwrap();
        assert!((w.center[0] + 0.0095).abs() < 1e-15 && (w.center[1] + 0.0095).abs() < 1e-15);
        let w = detector_window(&c, 0.5 * c.h_nom_m, Pose::default(), Channel::SinMinus).unwrap();
        assert!((w.center[0] + 0.5 * 0.0095).abs() < 1e-15);
        assert!((w.center[1] + 0.5 * 0.0095).abs() < 1e-15);
        assert!(detector_window(&c, 0.0, Pose::default(), Channel::CosPlus).is_err());
    }

    fn sinusoid(freq: f64) -> TextureField {
        generate(&TextureSpec::new(
            TextureKind::Sinusoid {
                freq_cpm: freq,
                angle_rad: 0.0,
            },
            1000,
            1.0,
        ))
        .unwrap()
    }

    #[test]
    fn render_uniform_and_sinusoid() {
        let flat = TextureField::uniform(0.3, 64, [1.0, 1.0]).unwrap();
        let w = DetectorWindow {
            center: [0.4, 0.1],
            extent_m: 0.084,
            yaw: 0.3,
        };
        assert!(render_view(&flat, &w, 32).iter().all(|v| (v - 0.3).abs() < 1e-15));

        // Axis-aligned window: each row is the texture sinusoid sampled at
        // the pixel ground positions, running backwards along x.
        let field = sinusoid(10.0);
        let w = DetectorWindow {
            center: [0.25, 0.5],
            extent_m: 0.2,
            yaw: 0.0,
        };
        let n = 64;
        let view = render_view(&field, &w, n);
        for r in [0, 31, 63] {
            for c in 0..n {
                let x = 0.25 - pixel_center(c, n) * 0.1;
                let exact = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * 10.0 * x).cos();
                // Bilinear interpolation of a 1 mm grid: error ~ (k dx)^2 / 8.
                assert!((view[r * n + c] - exact).abs() < 2.5e-3, "{r},{c}");
            }
        }
    }

    #[test]
    fn render_rotation_by_pi_flips_both_axes() {
        let field = generate(&TextureSpec::new(
            TextureKind::PerlinLike {
                base_cells: 8,
                octaves: 3,
                persistence: 0.5,
                seed: 1,
            },
            256,
            1.0,
        ))
        .unwrap();
        let n = 32;
        let w = DetectorWindow {
            center: [0.5, 0.5],
            extent_m: 0.1,
            yaw: 0.0,
        };
        let a = render_view(&field, &w, n);
        let b = render_view(&field, &DetectorWindow { yaw: std::f64::consts::PI, ..w }, n);
        for r in 0..n {
            for c in 0..n {
                assert!((a[r * n + c] - b[(n - 1 - r) * n + (n - 1 - c)]).abs() < 1e-9);
            }
        }
    }

    fn plain() -> SensorConfig {
        SensorConfig {
            blur_sigma_px: 0.0,
            falloff_exp_d: 0.0,
            falloff_exp_omega: 0.0,
            ..cfg()
        }
    }

    #[test]
    fn integrate_examples() {
        let n = 128;
        let ones = vec![1.0; n * n];
        assert_eq!(integrate_detector(&ones, &ones, &plain()).unwrap(), (n * n) as f64);
        let zeros = vec![0.0; n * n];
        let view: Vec<f64> = (0..n * n).map(|i| (i % 7) as f64 / 7.0).collect();
        assert_eq!(integrate_detector(&view, &zeros, &cfg()).unwrap(), 0.0);

        let m = rasterize(&GaborParams::FIXED, n).unwrap();
        let mask = m.grid(Channel::SinPlus);
        let brute: f64 = mask.iter().map(|v| 0.37 * v).sum();
        let got = integrate_detector(&vec![0.37; n * n], mask, &plain()).unwrap();
        assert!((got - brute).abs() < 1e-9 * brute);
        assert!(integrate_detector(&ones[..100], &ones, &plain()).is_err());
    }

    #[test]
    fn kernels_match_explicit_chain() {
        let n = 48;
        let c = SensorConfig { view_px: n, ..cfg() };
        let masks = rasterize(&GaborParams::new(5.0, 0.7, 0.8).unwrap(), n).unwrap();
        let kernels = DetectorKernels::new(&masks, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let view: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        for ch in Channel::ALL {
            let explicit = integrate_detector(&view, masks.grid(ch), &c).unwrap();
            let fast = kernels.integrate(&view, ch);
            assert!((explicit - fast).abs() <= 1e-9 * explicit.abs().max(1.0));
        }
    }

    #[test]
    fn fused_projection_matches_rendered_view() {
        let n = 40;
        let c = SensorConfig { view_px: n, ..cfg() };
        let masks = rasterize(&GaborParams::FIXED, n).unwrap();
        let kernels = DetectorKernels::new(&masks, &c).unwrap();
        let field = crate::texture::generate(&crate::texture::TextureSpec::new(
            crate::texture::TextureKind::BandlimitedNoise { low_cpm: 5.0, high_cpm: 120.0, seed: 3 },
            128,
            0.5,
        ))
        .unwrap();
        let all: Vec<&[f64]> = Channel::ALL.iter().map(|&ch| kernels.kernel(ch)).collect();
        // Interior, straddling the tile seam, and far outside the base tile.
        for (x, y, yaw) in [(0.2, 0.25, 0.3), (0.0, 0.49, 1.2), (-3.7, 8.1, -2.0)] {
            let w = detector_window(&c, c.h_nom_m, Pose { x, y, yaw }, Channel::CosPlus).unwrap();
            let mut fused = [0.0; 4];
            project_view(&field, &w, n, &all, &mut fused);
            let view = render_view(&field, &w, n);
            for ch in Channel::ALL {
                let want = kernels.integrate(&view, ch);
                assert!((fused[ch.index()] - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn integrate_is_linear_in_mask() {
        let n = 64;
        let c = SensorConfig { view_px: n, ..cfg() };
        let masks = rasterize(&GaborParams::FIXED, n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let view: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let plus = integrate_detector(&view, masks.grid(Channel::CosPlus), &c).unwrap();
        let minus = integrate_detector(&view, masks.grid(Channel::CosMinus), &c).unwrap();
        let signed = integrate_detector(&view, &masks.signed_cos(), &c).unwrap();
        assert!(((plus - minus) - signed).abs() <= 1e-9 * plus.abs().max(minus.abs()));
    }

    #[test]
    fn electronics_examples() {
        let c = cfg().noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = electronics(16384.0, &c, &mut rng);
        let step = 3.2 / 4095.0;
        assert!((v - 1.998_848).abs() <= step / 2.0);
        assert!(((v / step).round() - v / step).abs() < 1e-9);
        assert_eq!(electronics(40_000.0, &c, &mut rng), 3.2);
        let q = quantize(1.0, &c);
        assert_eq!(q, (1.0f64 / step).round() * step);
        assert!((q - 1.0).abs() <= step / 2.0);
        // Fixed point when re-fed as an ideal voltage.
        for raw in [0.0, 123.4, 9876.5, 26_000.0, 1e6] {
            let v = electronics(raw, &c, &mut rng);
            assert_eq!(electronics(v / c.gain, &c, &mut rng), v);
        }
        assert_eq!(electronics(0.0, &c, &mut rng), 0.0);
    }

    fn straight(v: f64, seconds: f64) -> PlanarPath {
        generate_path(
            &PathProfile::Straight { v },
            seconds,
            1000.0,
            KinematicBounds {
                v_max: 5.0,
                omega_max: 1.0,
            },
        )
        .unwrap()
    }

    fn small_cfg() -> SensorConfig {
        SensorConfig {
            view_px: 48,
            ..cfg()
        }
    }

    #[test]
    fn static_scene_is_constant() {
        let field = sinusoid(40.0);
        let c = small_cfg().noiseless();
        let masks = rasterize(&GaborParams::FIXED, c.view_px).unwrap();
        let (four, sig) =
            simulate(&field, &masks, &c, &straight(0.0, 0.2), &HeightProfile::Nominal, 1).unwrap();
        for ch in &four.channels {
            assert!(ch.iter().all(|v| *v == ch[0]));
        }
        assert_eq!(sig.len(), 201);
    }

    #[test]
    fn simulation_is_deterministic_and_differential_exact() {
        let field = generate(&TextureSpec {
            wrap: WrapMode::Tile,
            ..TextureSpec::new(
                TextureKind::BandlimitedNoise {
                    low_cpm: 20.0,
                    high_cpm: 200.0,
                    seed: 3,
                },
                256,
                0.5,
            )
        })
        .unwrap();
        let c = small_cfg();
        let masks = rasterize(&GaborParams::FIXED, c.view_px).unwrap();
        let path = straight(0.2, 0.3);
        let profile = HeightProfile::PerWindow {
            range_pct: 25.0,
            window_s: 0.1,
        };
        let a = simulate(&field, &masks, &c, &path, &profile, 42).unwrap();
        let b = simulate(&field, &masks, &c, &path, &profile, 42).unwrap();
        assert_eq!(a, b);
        let (four, sig) = a;
        for i in 0..sig.len() {
            assert_eq!(sig.s_cos[i], four.channels[0][i] - four.channels[1][i]);
            assert_eq!(sig.s_sin[i], four.channels[2][i] - four.channels[3][i]);
        }
        let step = c.quant_step();
        for ch in &four.channels {
            for v in ch {
                assert!((0.0..=c.v_clip).contains(v));
                assert!(((v / step).round() - v / step).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reversed_path_time_reverses_signals() {
        let field = generate(&TextureSpec::new(
            TextureKind::BandlimitedNoise {
                low_cpm: 30.0,
                high_cpm: 150.0,
                seed: 9,
            },
            256,
            0.5,
        ))
        .unwrap();
        let c = small_cfg().noiseless();
        let masks = rasterize(&GaborParams::FIXED, c.view_px).unwrap();
        let fwd = straight(0.2, 0.25);
        let rev = fwd.reversed();
        let (_, a) = simulate(&field, &masks, &c, &fwd, &HeightProfile::Nominal, 1).unwrap();
        let (_, b) = simulate(&field, &masks, &c, &rev, &HeightProfile::Nominal, 1).unwrap();
        let n = a.len();
        for i in 0..n {
            assert_eq!(a.s_cos[i], b.s_cos[n - 1 - i]);
            assert_eq!(a.s_sin[i], b.s_sin[n - 1 - i]);
        }
    }

    #[test]
    fn simulate_rejects_bad_paths() {
        let field = sinusoid(40.0);
        let c = small_cfg();
        let masks = rasterize(&GaborParams::FIXED, c.view_px).unwrap();
        let empty = PlanarPath::default();
        assert!(matches!(
            simulate(&field, &masks, &c, &empty, &HeightProfile::Nominal, 0),
            Err(Error::Empty(_))
        ));
        let slow = generate_path(
            &PathProfile::Straight { v: 0.1 },
            1.0,
            100.0,
            KinematicBounds::default(),
        )
        .unwrap();
        assert!(matches!(
            simulate(&field, &masks, &c, &slow, &HeightProfile::Nominal, 0),
            Err(Error::Timestamps(_))
        ));
    }

    #[test]
    fn height_profiles() {
        let c = cfg();
        let h = HeightProfile::PerWindow {
            range_pct: 25.0,
            window_s: 1.0,
        }
        .series(&c, 3500, 1e-3, 4)
        .unwrap();
        assert_eq!(h.len(), 3500);
        assert!(h.iter().all(|v| (0.045..=0.075).contains(v)));
        assert!(h[..1000].iter().all(|v| *v == h[0]));
        assert_ne!(h[0], h[1000]);
        let smooth = HeightProfile::Continuous {
            range_pct: 10.0,
            cutoff_hz: 5.0,
        }
        .series(&c, 2000, 1e-3, 4)
        .unwrap();
        assert!(smooth.iter().all(|v| (0.054 - 1e-12..=0.066 + 1e-12).contains(v)));
        assert!(HeightProfile::PerWindow {
            range_pct: 120.0,
            window_s: 1.0
        }
        .series(&c, 10, 1e-3, 0)
        .is_err());
    }
}

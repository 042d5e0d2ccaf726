//! Planar trajectories, velocity-aware resampling and a gyroscope model.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Relative tolerance on sample spacing for a clock to count as uniform.
pub(crate) const UNIFORM_TOL: f64 = 1e-6;

/// Timestamped SE(2) samples with body-frame forward speed and yaw rate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanarPath {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub yaw: Vec<f64>,
    pub v_x: Vec<f64>,
    pub omega_z: Vec<f64>,
}

impl PlanarPath {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            t: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            yaw: Vec::with_capacity(n),
            v_x: Vec::with_capacity(n),
            omega_z: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub(crate) fn push(&mut self, t: f64, x: f64, y: f64, yaw: f64, v: f64, w: f64) {
        self.t.push(t);
        self.x.push(x);
        self.y.push(y);
        self.yaw.push(yaw);
        self.v_x.push(v);
        self.omega_z.push(w);
    }

    pub fn check_lengths(&self) -> Result<()> {
        let n = self.t.len();
        for (what, len) in [
            ("path x", self.x.len()),
            ("path y", self.y.len()),
            ("path yaw", self.yaw.len()),
            ("path v_x", self.v_x.len()),
            ("path omega_z", self.omega_z.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    /// Sum of straight segment lengths between consecutive samples.
    pub fn length(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.y.windows(2))
            .map(|(x, y)| (x[1] - x[0]).hypot(y[1] - y[0]))
            .sum()
    }

    pub fn endpoint(&self) -> Option<(f64, f64)> {
        Some((*self.x.last()?, *self.y.last()?))
    }

    /// Sample interval if timestamps are uniform, otherwise an error.
    pub fn uniform_dt(&self) -> Result<f64> {
        uniform_dt(&self.t)
    }

    pub fn rate_hz(&self) -> Result<f64> {
        Ok(1.0 / self.uniform_dt()?)
    }

    /// Position at time `t` by linear interpolation, clamped to the ends.
    pub fn position_at(&self, t: f64) -> (f64, f64) {
        let n = self.t.len();
        if t <= self.t[0] {
            return (self.x[0], self.y[0]);
        }
        if t >= self.t[n - 1] {
            return (self.x[n - 1], self.y[n - 1]);
        }
        let i = self.t.partition_point(|&s| s <= t) - 1;
        let f = (t - self.t[i]) / (self.t[i + 1] - self.t[i]);
        (
            self.x[i] + (self.x[i + 1] - self.x[i]) * f,
            self.y[i] + (self.y[i + 1] - self.y[i]) * f,
        )
    }

    /// Mean of `v_x` over samples with `t` in `[t0, t1]`.
    pub fn mean_speed(&self, t0: f64, t1: f64) -> Option<f64> {
        let lo = self.t.partition_point(|&s| s < t0 - 1e-9);
        let hi = self.t.partition_point(|&s| s <= t1 + 1e-9);
        (hi > lo).then(|| self.v_x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64)
    }

    /// The same positions visited in reverse order: speed and yaw rate
    /// flip sign, heading is kept.
    pub fn reversed(&self) -> PlanarPath {
        let n = self.len();
        let mut out = PlanarPath::with_capacity(n);
        for k in 0..n {
            let i = n - 1 - k;
            out.push(
                self.t[k],
                self.x[i],
                self.y[i],
                self.yaw[i],
                -self.v_x[i],
                -self.omega_z[i],
            );
        }
        out
    }

    /// Rigidly moves the path so its first pose is the origin with heading 0.
    pub fn relative_to_start(&self) -> PlanarPath {
        if self.is_empty() {
            return self.clone();
        }
        let (x0, y0, yaw0) = (self.x[0], self.y[0], self.yaw[0]);
        let (s, c) = yaw0.sin_cos();
        let mut out = self.clone();
        for i in 0..self.len() {
            let (dx, dy) = (self.x[i] - x0, self.y[i] - y0);
            out.x[i] = c * dx + s * dy;
            out.y[i] = -s * dx + c * dy;
            out.yaw[i] = self.yaw[i] - yaw0;
        }
        out
    }

    pub fn translated(&self, dx: f64, dy: f64) -> PlanarPath {
        let mut out = self.clone();
        out.x.iter_mut().for_each(|x| *x += dx);
        out.y.iter_mut().for_each(|y| *y += dy);
        out
    }
}

pub(crate) fn uniform_dt(t: &[f64]) -> Result<f64> {
    if t.len() < 2 {
        return Err(Error::TooShort(format!("{} timestamps", t.len())));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Timestamps("monotone increasing"));
    }
    for w in t.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > UNIFORM_TOL * dt.max(1e-3) {
            return Err(Error::Timestamps("uniformly spaced"));
        }
    }
    Ok(dt)
}

/// Speed and yaw-rate envelope a generated path must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicBounds {
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_omega_max")]
    pub omega_max: f64,
}

fn default_v_max() -> f64 {
    0.4
}

fn default_omega_max() -> f64 {
    1.0
}

impl Default for KinematicBounds {
    fn default() -> Self {
        Self {
            v_max: default_v_max(),
            omega_max: default_omega_max(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum PathProfile {
    Straight {
        v: f64,
    },
    Arc {
        v: f64,
        omega: f64,
    },
    /// `v(t) = v_mean + amplitude sin(2 pi t / period_s)` along a straight line.
    SinusoidSpeed {
        v_mean: f64,
        amplitude: f64,
        period_s: f64,
    },
    /// Smooth random speed and yaw-rate processes through knots spaced
    /// `knot_interval_s` apart.
    RandomWaypoints {
        v_min: f64,
        v_max: f64,
        omega_max: f64,
        #[serde(default = "default_knot_interval")]
        knot_interval_s: f64,
        seed: u64,
    },
}

fn default_knot_interval() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    #[serde(flatten)]
    pub profile: PathProfile,
    pub duration_s: f64,
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default)]
    pub bounds: KinematicBounds,
}

fn default_rate() -> f64 {
    1000.0
}

impl PathSpec {
    pub fn new(profile: PathProfile, duration_s: f64) -> Self {
        Self {
            profile,
            duration_s,
            rate_hz: default_rate(),
            bounds: KinematicBounds::default(),
        }
    }

    pub fn with_bounds(mut self, bounds: KinematicBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        if let PathProfile::RandomWaypoints { seed: s, .. } = &mut out.profile {
            *s = seed;
        }
        out
    }

    pub fn generate(&self) -> Result<PlanarPath> {
        generate_path(&self.profile, self.duration_s, self.rate_hz, self.bounds)
    }
}

/// Generates a path from the origin with heading 0. `v_x` and `omega_z`
/// are stored from their analytic definitions.
pub fn generate_path(
    profile: &PathProfile,
    duration_s: f64,
    rate_hz: f64,
    bounds: KinematicBounds,
) -> Result<PlanarPath> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("duration_s", format!("{duration_s} must be > 0")));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::invalid("rate_hz", format!("{rate_hz} must be > 0")));
    }
    let n = (duration_s * rate_hz).round() as usize + 1;
    let time = |i: usize| i as f64 / rate_hz;
    let check_v = |v: f64| -> Result<()> {
        if v.abs() > bounds.v_max + 1e-12 {
            Err(Error::invalid("speed", format!("|{v}| exceeds v_max {}", bounds.v_max)))
        } else {
            Ok(())
        }
    };
    let check_w = |w: f64| -> Result<()> {
        if w.abs() > bounds.omega_max + 1e-12 {
            Err(Error::invalid(
                "yaw rate",
                format!("|{w}| exceeds omega_max {}", bounds.omega_max),
            ))
        } else {
            Ok(())
        }
    };

    let mut path = PlanarPath::with_capacity(n);
    match *profile {
        PathProfile::Straight { v } => {
            check_v(v)?;
            for i in 0..n {
                let t = time(i);
                path.push(t, v * t, 0.0, 0.0, v, 0.0);
            }
        }
        PathProfile::Arc { v, omega } => {
            check_v(v)?;
            check_w(omega)?;
            for i in 0..n {
                let t = time(i);
                let yaw = omega * t;
                let (x, y) = if omega == 0.0 {
                    (v * t, 0.0)
                } else {
                    let r = v / omega;
                    (r * yaw.sin(), r * (1.0 - yaw.cos()))
                };
                path.push(t, x, y, yaw, v, omega);
            }
        }
        PathProfile::SinusoidSpeed {
            v_mean,
            amplitude,
            period_s,
        } => {
            if !(period_s > 0.0) {
                return Err(Error::invalid("period_s", period_s.to_string()));
            }
            check_v(v_mean.abs() + amplitude.abs())?;
            let k = 2.0 * PI / period_s;
            for i in 0..n {
                let t = time(i);
                let v = v_mean + amplitude * (k * t).sin();
                let x = v_mean * t + amplitude * (1.0 - (k * t).cos()) / k;
                path.push(t, x, 0.0, 0.0, v, 0.0);
            }
        }
        PathProfile::RandomWaypoints {
            v_min,
            v_max,
            omega_max,
            knot_interval_s,
            seed,
        } => {
            if !(v_max >= v_min) || !(knot_interval_s > 0.0) || !(omega_max >= 0.0) {
                return Err(Error::invalid(
                    "random_waypoints",
                    "need v_min <= v_max, omega_max >= 0, knot_interval_s > 0",
                ));
            }
            check_v(v_min)?;
            check_v(v_max)?;
            check_w(omega_max)?;
            let knots = (duration_s / knot_interval_s).ceil() as usize + 2;
            let mut rng = rng::stream(seed, rng::tag::PATH, 0);
            let v_knots: Vec<f64> = (0..knots).map(|_| rng.random_range(v_min..=v_max)).collect();
            let w_knots: Vec<f64> = (0..knots)
                .map(|_| rng.random_range(-omega_max..=omega_max))
                .collect();
            let speed = SmoothKnots::new(v_knots, knot_interval_s);
            let yaw_rate = SmoothKnots::new(w_knots, knot_interval_s);
            integrate_profile(&mut path, n, rate_hz, &speed, &yaw_rate);
        }
    }
    Ok(path)
}

/// Cosine-blended piecewise signal through equally spaced knots, with a
/// closed-form integral.
struct SmoothKnots {
    knots: Vec<f64>,
    dt: f64,
}

impl SmoothKnots {
    fn new(knots: Vec<f64>, dt: f64) -> Self {
        Self { knots, dt }
    }

    fn segment(&self, t: f64) -> (usize, f64) {
        let s = (t / self.dt).max(0.0);
        let i = (s.floor() as usize).min(self.knots.len() - 2);
        (i, s - i as f64)
    }

    fn value(&self, t: f64) -> f64 {
        let (i, s) = self.segment(t);
        let (a, b) = (self.knots[i], self.knots[i + 1]);
        a + (b - a) * 0.5 * (1.0 - (PI * s).cos())
    }

    /// Integral from 0 to `t`.
    fn integral(&self, t: f64) -> f64 {
        let (i, s) = self.segment(t);
        let full: f64 = self
            .knots
            .windows(2)
            .take(i)
            .map(|w| 0.5 * (w[0] + w[1]) * self.dt)
            .sum();
        let (a, b) = (self.knots[i], self.knots[i + 1]);
        let partial = self.dt * (a * s + (b - a) * 0.5 * (s - (PI * s).sin() / PI));
        full + partial
    }
}

/// Fills `path` by integrating speed along the closed-form heading with
/// Simpson sub-steps between output samples.
fn integrate_profile(
    path: &mut PlanarPath,
    n: usize,
    rate_hz: f64,
    speed: &SmoothKnots,
    yaw_rate: &SmoothKnots,
) {
    const SUB: usize = 8;
    let (mut x, mut y) = (0.0, 0.0);
    let vel = |t: f64| {
        let v = speed.value(t);
        let psi = yaw_rate.integral(t);
        (v * psi.cos(), v * psi.sin())
    };
    for i in 0..n {
        let t = i as f64 / rate_hz;
        if i > 0 {
            let t_prev = (i - 1) as f64 / rate_hz;
            let h = (t - t_prev) / SUB as f64;
            for k in 0..SUB {
                let a = t_prev + k as f64 * h;
                let (ax, ay) = vel(a);
                let (mx, my) = vel(a + 0.5 * h);
                let (bx, by) = vel(a + h);
                x += h / 6.0 * (ax + 4.0 * mx + bx);
                y += h / 6.0 * (ay + 4.0 * my + by);
            }
        }
        path.push(t, x, y, yaw_rate.integral(t), speed.value(t), yaw_rate.value(t));
    }
}

/// Unwraps an angle series so consecutive differences lie in `(-pi, pi]`.
pub fn unwrap_angles(a: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(a.len());
    let mut offset = 0.0_f64;
    for (i, &v) in a.iter().enumerate() {
        if i > 0 {
            let d = v + offset - out[i - 1];
            if d > PI {
                offset -= 2.0 * PI * ((d + PI) / (2.0 * PI)).floor();
            } else if d < -PI {
                offset += 2.0 * PI * ((-d + PI) / (2.0 * PI)).floor();
            }
        }
        out.push(v + offset);
    }
    out
}

/// Resamples onto a uniform clock at `rate_hz` with cubic Hermite
/// interpolation of position and unwrapped yaw, using the stored
/// velocities as knot derivatives.
pub fn resample(path: &PlanarPath, rate_hz: f64) -> Result<PlanarPath> {
    path.check_lengths()?;
    if path.len() < 4 {
        return Err(Error::TooShort(format!("{} samples, need at least 4", path.len())));
    }
    if path.t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Timestamps("strictly increasing"));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::invalid("rate_hz", rate_hz.to_string()));
    }
    let yaw = unwrap_angles(&path.yaw);
    let vx: Vec<f64> = (0..path.len()).map(|i| path.v_x[i] * yaw[i].cos()).collect();
    let vy: Vec<f64> = (0..path.len()).map(|i| path.v_x[i] * yaw[i].sin()).collect();

    let t0 = path.t[0];
    let span = path.t[path.len() - 1] - t0;
    let m = (span * rate_hz + 1e-9).floor() as usize + 1;
    let mut out = PlanarPath::with_capacity(m);
    let mut seg = 0;
    for k in 0..m {
        let t = t0 + k as f64 / rate_hz;
        while seg + 2 < path.len() && path.t[seg + 1] <= t {
            seg += 1;
        }
        let (ta, tb) = (path.t[seg], path.t[seg + 1]);
        let h = tb - ta;
        let s = ((t - ta) / h).clamp(0.0, 1.0);
        let (x, dx) = hermite(path.x[seg], path.x[seg + 1], vx[seg], vx[seg + 1], h, s);
        let (y, dy) = hermite(path.y[seg], path.y[seg + 1], vy[seg], vy[seg + 1], h, s);
        let (psi, dpsi) = hermite(
            yaw[seg],
            yaw[seg + 1],
            path.omega_z[seg],
            path.omega_z[seg + 1],
            h,
            s,
        );
        let v = dx * psi.cos() + dy * psi.sin();
        out.push(t, x, y, psi, v, dpsi);
    }
    Ok(out)
}

/// Cubic Hermite value and time derivative at normalized position `s`.
#[inline]
fn hermite(p0: f64, p1: f64, m0: f64, m1: f64, h: f64, s: f64) -> (f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let value = h00 * p0 + h10 * h * m0 + h01 * p1 + h11 * h * m1;
    let d00 = 6.0 * s2 - 6.0 * s;
    let d10 = 3.0 * s2 - 4.0 * s + 1.0;
    let d01 = -6.0 * s2 + 6.0 * s;
    let d11 = 3.0 * s2 - 2.0 * s;
    let deriv = (d00 * p0 + d01 * p1) / h + d10 * m0 + d11 * m1;
    (value, deriv)
}

/// Five-point finite-difference derivative on a uniform clock, with
/// one-sided five-point stencils at the ends.
pub fn differentiate_5pt(f: &[f64], dt: f64) -> Vec<f64> {
    let n = f.len();
    assert!(n >= 5, "five-point stencil needs five samples");
    let mut d = vec![0.0; n];
    for i in 0..n {
        d[i] = if i >= 2 && i + 2 < n {
            (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * dt)
        } else if i < 2 {
            let g = &f[i..i + 5];
            match i {
                0 => (-25.0 * g[0] + 48.0 * g[1] - 36.0 * g[2] + 16.0 * g[3] - 3.0 * g[4]) / (12.0 * dt),
                _ => (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / (12.0 * dt),
            }
        } else {
            let g = &f[n - 5..];
            match n - 1 - i {
                0 => (3.0 * g[0] - 16.0 * g[1] + 36.0 * g[2] - 48.0 * g[3] + 25.0 * g[4]) / (12.0 * dt),
                _ => (-g[0] + 6.0 * g[1] - 18.0 * g[2] + 10.0 * g[3] + 3.0 * g[4]) / (12.0 * dt),
            }
        };
    }
    d
}

/// Reconstructs `v_x` and `omega_z` from poses on a uniform clock.
pub fn reconstruct_rates(path: &mut PlanarPath) -> Result<()> {
    if path.len() < 5 {
        return Err(Error::TooShort(format!(
            "{} samples, differentiation needs 5",
            path.len()
        )));
    }
    let dt = path.uniform_dt()?;
    let yaw = unwrap_angles(&path.yaw);
    let dx = differentiate_5pt(&path.x, dt);
    let dy = differentiate_5pt(&path.y, dt);
    path.omega_z = differentiate_5pt(&yaw, dt);
    path.v_x = (0..path.len())
        .map(|i| dx[i] * yaw[i].cos() + dy[i] * yaw[i].sin())
        .collect();
    Ok(())
}

/// Rescales speed uniformly so the largest `|v_x|` equals `v_max`; the
/// clock and yaw history are kept and positions are re-integrated.
pub fn scale_speed(path: &PlanarPath, v_max: f64) -> PlanarPath {
    let peak = path.v_x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return path.clone();
    }
    let k = v_max / peak;
    let mut out = path.clone();
    out.v_x.iter_mut().for_each(|v| *v *= k);
    for i in 1..out.len() {
        let h = out.t[i] - out.t[i - 1];
        let psi = 0.5 * (out.yaw[i] + out.yaw[i - 1]);
        let v = 0.5 * (out.v_x[i] + out.v_x[i - 1]);
        out.x[i] = out.x[i - 1] + v * h * psi.cos();
        out.y[i] = out.y[i - 1] + v * h * psi.sin();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GyroModel {
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub bias: f64,
    /// Random-walk intensity in rad/s per sqrt(s).
    #[serde(default)]
    pub bias_walk_std: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Measured yaw rate: truth plus a (possibly walking) bias and white noise.
pub fn gyro_measure(path: &PlanarPath, model: &GyroModel) -> Result<Vec<f64>> {
    if model.noise_std < 0.0 || model.bias_walk_std < 0.0 {
        return Err(Error::invalid("gyro model", "standard deviations must be >= 0"));
    }
    let mut rng = rng::stream(model.seed, rng::tag::GYRO, 0);
    let mut bias = model.bias;
    let mut out = Vec::with_capacity(path.len());
    for i in 0..path.len() {
        if i > 0 && model.bias_walk_std > 0.0 {
            let dt = path.t[i] - path.t[i - 1];
            bias += model.bias_walk_std * dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let noise = if model.noise_std > 0.0 {
            model.noise_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        out.push(path.omega_z[i] + bias + noise);
    }
    Ok(out)
}

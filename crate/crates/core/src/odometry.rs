//! Dead reckoning from decoded forward speed and gyro yaw rate, and
//! trajectory scoring.
//!
//! Speed estimates are sparse and gated; they are placed on the gyro
//! clock with a hold policy before integration. Scores compare positions
//! directly from the shared start, without any alignment step.

use serde::{Deserialize, Serialize};

use crate::decoder::SpeedEstimate;
use crate::error::{Error, Result};
use crate::trajectory::{uniform_dt, PlanarPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    Euler,
    #[default]
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldPolicy {
    /// Keep the last accepted speed through gaps.
    #[default]
    ZeroOrderHold,
    /// Assume standstill once an estimate is older than the gap tolerance.
    ZeroSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryConfig {
    pub integration: Integration,
    pub rate_hz: f64,
    pub hold_policy: HoldPolicy,
    /// Time between a window's end stamp and the instant its speed best
    /// describes. Half the decoder window by default.
    pub latency_s: f64,
    /// Age after which `ZeroSpeed` drops an estimate.
    pub gap_tolerance_s: f64,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            integration: Integration::Midpoint,
            rate_hz: 1000.0,
            hold_policy: HoldPolicy::ZeroOrderHold,
            latency_s: 0.5,
            gap_tolerance_s: 0.05,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::invalid("rate_hz", format!("{} must be > 0", self.rate_hz)));
        }
        if !(self.latency_s >= 0.0) {
            return Err(Error::invalid("latency_s", "must be >= 0"));
        }
        if !(self.gap_tolerance_s >= 0.0) {
            return Err(Error::invalid("gap_tolerance_s", "must be >= 0"));
        }
        Ok(())
    }
}

/// Integrates speed and yaw rate samples from the origin with heading 0.
/// Each step holds the rates of its starting sample.
pub fn integrate_rates(t: &[f64], v: &[f64], omega: &[f64], scheme: Integration) -> Result<PlanarPath> {
    if t.is_empty() {
        return Err(Error::Empty("rate series"));
    }
    for (what, len) in [("speed series", v.len()), ("yaw-rate series", omega.len())] {
        if len != t.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: t.len(),
                actual: len,
            });
        }
    }
    let mut path = PlanarPath::with_capacity(t.len());
    let (mut x, mut y, mut psi) = (0.0, 0.0, 0.0);
    path.push(t[0], x, y, psi, v[0], omega[0]);
    for i in 1..t.len() {
        let dt = t[i] - t[i - 1];
        if !(dt > 0.0) {
            return Err(Error::Timestamps("strictly increasing"));
        }
        let (vi, wi) = (v[i - 1], omega[i - 1]);
        let heading = match scheme {
            Integration::Euler => psi,
            Integration::Midpoint => psi + 0.5 * wi * dt,
        };
        x += vi * dt * heading.cos();
        y += vi * dt * heading.sin();
        psi += wi * dt;
        path.push(t[i], x, y, psi, v[i], omega[i]);
    }
    Ok(path)
}

/// Places accepted speed estimates on the clock `t`. Times before the
/// first estimate take its value.
pub fn hold_speeds(estimates: &[SpeedEstimate], t: &[f64], cfg: &OdometryConfig) -> Result<Vec<f64>> {
    let est: Vec<(f64, f64)> = estimates
        .iter()
        .filter(|e| e.accepted)
        .map(|e| (e.t_s - cfg.latency_s, e.v_hat))
        .collect();
    if est.is_empty() {
        return Err(Error::Empty("accepted speed estimates"));
    }
    if est.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::Timestamps("non-decreasing"));
    }
    let mut out = Vec::with_capacity(t.len());
    let mut j = 0;
    for &tau in t {
        while j + 1 < est.len() && est[j + 1].0 <= tau {
            j += 1;
        }
        let (t_ref, v) = est[j];
        let stale = tau - t_ref > cfg.gap_tolerance_s;
        out.push(match cfg.hold_policy {
            HoldPolicy::ZeroSpeed if stale => 0.0,
            _ => v,
        });
    }
    Ok(out)
}

/// Fuses speed estimates with yaw rate sampled on a uniform clock at
/// `cfg.rate_hz`.
pub fn integrate(
    estimates: &[SpeedEstimate],
    omega_t: &[f64],
    omega: &[f64],
    cfg: &OdometryConfig,
) -> Result<PlanarPath> {
    cfg.validate()?;
    if estimates.is_empty() {
        return Err(Error::Empty("speed series"));
    }
    if omega.is_empty() || omega_t.is_empty() {
        return Err(Error::Empty("yaw-rate series"));
    }
    if omega.len() != omega_t.len() {
        return Err(Error::LengthMismatch {
            what: "yaw-rate series",
            expected: omega_t.len(),
            actual: omega.len(),
        });
    }
    let dt = 1.0 / cfg.rate_hz;
    if omega_t.len() > 1 {
        let got = uniform_dt(omega_t)?;
        if (got - dt).abs() * omega_t.len() as f64 > dt {
            return Err(Error::invalid(
                "yaw-rate clock",
                format!("sampled at {:.6} Hz, expected {} Hz", 1.0 / got, cfg.rate_hz),
            ));
        }
    }
    let (t0, t1) = (omega_t[0], omega_t[omega_t.len() - 1]);
    let first = estimates[0].t_s - cfg.latency_s;
    let last = estimates[estimates.len() - 1].t_s - cfg.latency_s;
    if first > t1 + dt || last < t0 - dt {
        return Err(Error::DisjointTime);
    }
    let v = hold_speeds(estimates, omega_t, cfg)?;
    integrate_rates(omega_t, &v, omega, cfg.integration)
}

/// Pairs of (estimate, reference) positions over the shared time range.
fn paired_positions(est: &PlanarPath, reference: &PlanarPath) -> Result<Vec<((f64, f64), (f64, f64))>> {
    if est.is_empty() || reference.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    est.check_lengths()?;
    reference.check_lengths()?;
    let (r0, r1) = (reference.t[0], reference.t[reference.len() - 1]);
    let tol = 1e-9 * (1.0 + r1.abs());
    let pairs: Vec<_> = (0..est.len())
        .filter(|&i| est.t[i] >= r0 - tol && est.t[i] <= r1 + tol)
        .map(|i| ((est.x[i], est.y[i]), reference.position_at(est.t[i])))
        .collect();
    if pairs.is_empty() {
        return Err(Error::DisjointTime);
    }
    Ok(pairs)
}

/// Root-mean-square position error, reference interpolated onto the
/// estimate's timestamps.
pub fn ate(est: &PlanarPath, reference: &PlanarPath) -> Result<f64> {
    let pairs = paired_positions(est, reference)?;
    let sum: f64 = pairs
        .iter()
        .map(|((ex, ey), (rx, ry))| (ex - rx).powi(2) + (ey - ry).powi(2))
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Endpoint error over the last shared timestamp, as a percentage of
/// the reference path length.
pub fn drift(est: &PlanarPath, reference: &PlanarPath) -> Result<f64> {
    let pairs = paired_positions(est, reference)?;
    let length = reference.length();
    if !(length > 0.0) {
        return Err(Error::invalid("reference path", "has zero length"));
    }
    let ((ex, ey), (rx, ry)) = pairs[pairs.len() - 1];
    Ok(100.0 * (ex - rx).hypot(ey - ry) / length)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScore {
    pub ate_m: f64,
    pub drift_pct: f64,
    pub path_length_m: f64,
    pub duration_s: f64,
}

pub fn score(est: &PlanarPath, reference: &PlanarPath) -> Result<TrajectoryScore> {
    Ok(TrajectoryScore {
        ate_m: ate(est, reference)?,
        drift_pct: drift(est, reference)?,
        path_length_m: reference.length(),
        duration_s: reference.duration(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{generate_path, KinematicBounds, PathProfile};

    fn clock(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn straight_line_endpoint() {
        let t = clock(10_001, 1e-3);
        let p = integrate_rates(&t, &vec![0.2; t.len()], &vec![0.0; t.len()], Integration::Midpoint).unwrap();
        let (x, y) = p.endpoint().unwrap();
        assert!((x - 2.0).abs() < 1e-6 && y.abs() < 1e-12);
    }

    #[test]
    fn half_circle_endpoint() {
        let duration = std::f64::consts::PI / 0.2;
        let n = (duration * 1000.0).round() as usize;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * duration / n as f64).collect();
        let p = integrate_rates(&t, &vec![0.2; n + 1], &vec![0.2; n + 1], Integration::Midpoint).unwrap();
        let (x, y) = p.endpoint().unwrap();
        assert!(x.abs() < 1e-4 && (y - 2.0).abs() < 1e-4, "({x}, {y})");
        // Euler lags by a first-order amount.
        let e = integrate_rates(&t, &vec![0.2; n + 1], &vec![0.2; n + 1], Integration::Euler).unwrap();
        let (ex, ey) = e.endpoint().unwrap();
        assert!(ex.abs().hypot(ey - 2.0) > 1e-4);
    }

    #[test]
    fn pure_rotation_stays_put() {
        let t = clock(2001, 1e-3);
        let p = integrate_rates(&t, &vec![0.0; t.len()], &vec![0.7; t.len()], Integration::Midpoint).unwrap();
        assert_eq!(p.endpoint().unwrap(), (0.0, 0.0));
        assert!((p.yaw[2000] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn closed_loop_consistency() {
        let path = generate_path(
            &PathProfile::RandomWaypoints {
                v_min: 0.1,
                v_max: 0.4,
                omega_max: 0.8,
                knot_interval_s: 2.0,
                seed: 4,
            },
            40.0,
            1000.0,
            KinematicBounds::default(),
        )
        .unwrap();
        let mut rebuilt = integrate_rates(&path.t, &path.v_x, &path.omega_z, Integration::Midpoint).unwrap();
        // Same start pose as the reference.
        let (c, s) = (path.yaw[0].cos(), path.yaw[0].sin());
        for i in 0..rebuilt.len() {
            let (x, y) = (rebuilt.x[i], rebuilt.y[i]);
            rebuilt.x[i] = path.x[0] + c * x - s * y;
            rebuilt.y[i] = path.y[0] + s * x + c * y;
        }
        let err = ate(&rebuilt, &path).unwrap();
        assert!(err < 1e-3 * path.length() / 10.0, "{err}");
    }

    #[test]
    fn gyro_bias_sensitivity() {
        let (v, b, secs) = (0.3, 0.004, 20.0);
        let t = clock((secs * 1000.0) as usize + 1, 1e-3);
        let p = integrate_rates(&t, &vec![v; t.len()], &vec![b; t.len()], Integration::Midpoint).unwrap();
        let lateral = p.endpoint().unwrap().1;
        let predicted = v * secs * secs * b / 2.0;
        assert!(b * secs <= 0.1);
        assert!((lateral - predicted).abs() < 0.1 * predicted, "{lateral} vs {predicted}");
    }

    fn line(n: usize, dx: f64, dy: f64) -> PlanarPath {
        let mut p = PlanarPath::with_capacity(n);
        for k in 0..n {
            p.push(k as f64 * 0.1, k as f64 * 0.1 + dx, dy, 0.0, 1.0, 0.0);
        }
        p
    }

    #[test]
    fn ate_examples() {
        let r = line(101, 0.0, 0.0);
        assert_eq!(ate(&r, &r).unwrap(), 0.0);
        assert_eq!(drift(&r, &r).unwrap(), 0.0);
        assert!((ate(&line(101, 1.0, 0.0), &r).unwrap() - 1.0).abs() < 1e-12);

        let mut even = line(100, 0.0, 0.0);
        for i in 0..50 {
            even.x[i] += 0.3;
            even.y[i] += 0.4;
        }
        let hand = (0.5f64 * 0.5 * 50.0 / 100.0).sqrt();
        assert!((ate(&even, &line(100, 0.0, 0.0)).unwrap() - hand).abs() < 1e-12);
        assert!((hand - 0.353_553_390_593_273_8).abs() < 1e-15);
    }

    #[test]
    fn ate_rigid_invariance() {
        let path = generate_path(&PathProfile::Arc { v: 0.3, omega: 0.2 }, 10.0, 100.0, KinematicBounds::default()).unwrap();
        let mut est = path.clone();
        est.x.iter_mut().enumerate().for_each(|(i, x)| *x += 0.01 * (i as f64 * 0.1).sin());
        let base = ate(&est, &path).unwrap();
        let (c, s, tx, ty) = (0.6f64.cos(), 0.6f64.sin(), 3.0, -1.5);
        let tf = |p: &PlanarPath| {
            let mut q = p.clone();
            for i in 0..q.len() {
                q.x[i] = c * p.x[i] - s * p.y[i] + tx;
                q.y[i] = s * p.x[i] + c * p.y[i] + ty;
            }
            q
        };
        assert!((ate(&tf(&est), &tf(&path)).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn drift_arithmetic() {
        let r = line(101, 0.0, 0.0); // 10 m
        let mut e = r.clone();
        e.y[100] = 0.05;
        assert!((drift(&e, &r).unwrap() - 0.5).abs() < 1e-12);
        e.y[100] = 0.06;
        assert!((drift(&e, &r).unwrap() - 0.6).abs() < 1e-12);
        let still = line(1, 0.0, 0.0);
        assert!(drift(&still, &still).is_err());
    }

    #[test]
    fn disjoint_and_empty() {
        let r = line(11, 0.0, 0.0);
        let mut late = r.clone();
        late.t.iter_mut().for_each(|t| *t += 100.0);
        assert!(matches!(ate(&late, &r), Err(Error::DisjointTime)));
        assert!(integrate(&[], &[0.0], &[0.0], &OdometryConfig::default()).is_err());
    }

    fn est(t_s: f64, v: f64, accepted: bool) -> SpeedEstimate {
        SpeedEstimate {
            t_s,
            v_hat: v,
            confidence: if accepted { 0.9 } else { 0.0 },
            f_peak_hz: 0.0,
            accepted,
        }
    }

    #[test]
    fn hold_policies() {
        let estimates = [est(1.0, 0.1, true), est(1.01, 0.9, false), est(1.3, 0.2, true)];
        let t = [0.0, 0.5, 0.6, 0.79, 0.81, 2.0];
        let cfg = OdometryConfig::default();
        assert_eq!(hold_speeds(&estimates, &t, &cfg).unwrap(), vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.2]);
        let zs = OdometryConfig {
            hold_policy: HoldPolicy::ZeroSpeed,
            ..cfg
        };
        assert_eq!(hold_speeds(&estimates, &t, &zs).unwrap(), vec![0.1, 0.1, 0.0, 0.0, 0.2, 0.0]);
    }

    #[test]
    fn integrate_from_estimates() {
        let estimates: Vec<_> = (0..=90).map(|k| est(1.0 + k as f64 * 0.1, 0.2, true)).collect();
        let t = clock(10_001, 1e-3);
        let p = integrate(&estimates, &t, &vec![0.0; t.len()], &OdometryConfig::default()).unwrap();
        assert!((p.endpoint().unwrap().0 - 2.0).abs() < 1e-9);
        let bad = clock(1001, 2e-3);
        assert!(integrate(&estimates, &bad, &vec![0.0; 1001], &OdometryConfig::default()).is_err());
    }
}

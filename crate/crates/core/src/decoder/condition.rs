//! Conditioning of raw four-channel DAQ logs: mains notch, Butterworth
//! low-pass, and rational polyphase resampling to the decoder rate.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::{FourChannelTrace, SignalTrace};
use crate::trajectory::uniform_dt;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    pub input_rate_hz: f64,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub lowpass_hz: f64,
    pub output_rate_hz: f64,
    /// Stopband attenuation of the resampling filters.
    pub resampler_atten_db: f64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            input_rate_hz: 41_600.0,
            notch_hz: 60.0,
            notch_q: 30.0,
            lowpass_hz: 450.0,
            output_rate_hz: 1000.0,
            resampler_atten_db: 80.0,
        }
    }
}

impl ConditioningConfig {
    pub fn validate(&self) -> Result<()> {
        let whole = |v: f64| v > 0.0 && v.fract() == 0.0 && v < 1e9;
        if !whole(self.input_rate_hz) {
            return Err(Error::invalid("input_rate_hz", format!("{} is not a positive whole rate", self.input_rate_hz)));
        }
        if !whole(self.output_rate_hz) {
            return Err(Error::invalid("output_rate_hz", format!("{} is not a positive whole rate", self.output_rate_hz)));
        }
        if !(self.lowpass_hz > 0.0 && self.lowpass_hz < self.output_rate_hz / 2.0) {
            return Err(Error::invalid("lowpass_hz", format!("{} must lie below output_rate/2", self.lowpass_hz)));
        }
        if self.output_rate_hz > self.input_rate_hz {
            return Err(Error::invalid("output_rate_hz", "must not exceed input_rate_hz"));
        }
        if !(self.notch_hz > 0.0 && self.notch_hz < self.input_rate_hz / 2.0) {
            return Err(Error::invalid("notch_hz", self.notch_hz.to_string()));
        }
        if !(self.notch_q > 0.0) {
            return Err(Error::invalid("notch_q", self.notch_q.to_string()));
        }
        if !(self.resampler_atten_db >= 21.0) {
            return Err(Error::invalid("resampler_atten_db", "must be >= 21"));
        }
        Ok(())
    }
}

/// Second-order section, transposed direct form II, `a0` normalized to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    pub fn new(b: [f64; 3], a0: f64, a: [f64; 2]) -> Self {
        Self {
            b: b.map(|v| v / a0),
            a: a.map(|v| v / a0),
            z: [0.0; 2],
        }
    }

    pub fn notch(f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::new([1.0, -2.0 * c, 1.0], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    pub fn lowpass(f0: f64, q: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        let b1 = 1.0 - c;
        Self::new([b1 / 2.0, b1, b1 / 2.0], 1.0 + alpha, [-2.0 * c, 1.0 - alpha])
    }

    /// Starts the state as if `x` had been applied forever.
    pub fn prime(&mut self, x: f64) {
        let g = self.dc_gain();
        let y = g * x;
        self.z[1] = self.b[2] * x - self.a[1] * y;
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    pub fn response(&self, f: f64, fs: f64) -> Complex<f64> {
        let z1 = Complex::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (1.0 + self.a[0] * z1 + self.a[1] * z2)
    }
}

/// Notch followed by a 4th-order Butterworth low-pass as two sections.
#[derive(Debug, Clone)]
pub struct ConditioningChain {
    pub sections: Vec<Biquad>,
    pub fs: f64,
}

impl ConditioningChain {
    pub fn new(cfg: &ConditioningConfig) -> Self {
        let fs = cfg.input_rate_hz;
        // Pole pair Q values of a 4th-order Butterworth.
        let qs = [1.0 / (2.0 * (PI / 8.0).cos()), 1.0 / (2.0 * (3.0 * PI / 8.0).cos())];
        let mut sections = vec![Biquad::notch(cfg.notch_hz, cfg.notch_q, fs)];
        sections.extend(qs.iter().map(|&q| Biquad::lowpass(cfg.lowpass_hz, q, fs)));
        Self { sections, fs }
    }

    pub fn response(&self, f: f64) -> Complex<f64> {
        self.sections.iter().map(|s| s.response(f, self.fs)).product()
    }

    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut secs = self.sections.clone();
        if let Some(&x0) = x.first() {
            secs.iter_mut().for_each(|s| s.prime(x0));
        }
        x.iter()
            .map(|&v| secs.iter_mut().fold(v, |acc, s| s.process(acc)))
            .collect()
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Zero-delay rational resampler `fs_out = fs_in * up / down` with a
/// Kaiser windowed-sinc prototype applied polyphase.
#[derive(Debug, Clone)]
pub struct RationalResampler {
    pub up: usize,
    pub down: usize,
    taps: Vec<f64>,
}

impl RationalResampler {
    /// `pass_hz` and `stop_hz` are relative to the input rate `fs_in`.
    pub fn design(up: usize, down: usize, fs_in: f64, pass_hz: f64, stop_hz: f64, atten_db: f64) -> Self {
        let fs_up = fs_in * up as f64;
        let cutoff = 0.5 * (pass_hz + stop_hz);
        let dw = 2.0 * PI * (stop_hz - pass_hz) / fs_up;
        let mut n = ((atten_db - 7.95) / (2.285 * dw)).ceil() as usize + 1;
        n |= 1;
        let beta = if atten_db > 50.0 {
            0.1102 * (atten_db - 8.7)
        } else {
            0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
        };
        let c = (n - 1) as f64 / 2.0;
        let fc = cutoff / fs_up;
        let i0b = bessel_i0(beta);
        let mut taps: Vec<f64> = (0..n)
            .map(|k| {
                let m = k as f64 - c;
                let sinc = if m == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * m).sin() / (PI * m) };
                let r = m / c;
                sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b
            })
            .collect();
        // Each polyphase branch gets exact unit gain at DC.
        for phase in 0..up {
            let sum: f64 = taps.iter().skip(phase).step_by(up).sum();
            taps.iter_mut().skip(phase).step_by(up).for_each(|t| *t /= sum);
        }
        let g = gcd(up, down);
        Self { up: up / g, down: down / g, taps }
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        if input_len == 0 {
            0
        } else {
            (input_len - 1) * self.up / self.down + 1
        }
    }

    /// Output sample `m` sits at input position `m * down / up`; edges are
    /// held at the first and last sample.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let n_out = self.output_len(x.len());
        let n_taps = self.taps.len();
        let c = n_taps / 2;
        let (up, len) = (self.up as i64, x.len() as i64);
        (0..n_out)
            .map(|m| {
                let pos = (m * self.down + c) as i64;
                let k0 = pos.rem_euclid(up) as usize;
                let mut acc = 0.0;
                for k in (k0..n_taps).step_by(self.up) {
                    let q = (pos - k as i64) / up;
                    acc += self.taps[k] * x[q.clamp(0, len - 1) as usize];
                }
                acc
            })
            .collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resampling stages from the input rate to the output rate.
pub(crate) fn resampling_stages(cfg: &ConditioningConfig) -> Vec<RationalResampler> {
    let fs_in = cfg.input_rate_hz as usize;
    let fs_out = cfg.output_rate_hz as usize;
    if fs_in == fs_out {
        return Vec::new();
    }
    let mut stages = Vec::new();
    let mut rate = fs_in;
    // Coarse integer decimation first while the intermediate rate stays
    // well above the output band.
    let d1 = fs_in / (4 * fs_out);
    if d1 >= 2 {
        let inter = fs_in / d1;
        // Anything folding below the final stopband edge must be removed here.
        let stop = inter as f64 - (cfg.output_rate_hz - cfg.lowpass_hz);
        stages.push(RationalResampler::design(
            1,
            d1,
            fs_in as f64,
            cfg.lowpass_hz,
            stop,
            cfg.resampler_atten_db,
        ));
        if fs_in % d1 == 0 {
            rate = inter;
        } else {
            // Non-integer intermediate rate: fall back to a single stage.
            stages.clear();
        }
    }
    let g = gcd(fs_out, rate);
    let (up, down) = (fs_out / g, rate / g);
    if up != down {
        let stop = cfg.output_rate_hz - cfg.lowpass_hz;
        stages.push(RationalResampler::design(
            up,
            down,
            rate as f64,
            cfg.lowpass_hz,
            stop,
            cfg.resampler_atten_db,
        ));
    }
    stages
}

/// Filters, resamples and differences one raw log into the decoder's
/// signal pair.
pub fn condition(raw: &FourChannelTrace, cfg: &ConditioningConfig) -> Result<SignalTrace> {
    cfg.validate()?;
    let n = raw.len();
    if n < 2 {
        return Err(Error::TooShort(format!("{n} raw samples")));
    }
    for ch in &raw.channels {
        if ch.len() != n {
            return Err(Error::LengthMismatch {
                what: "raw channel",
                expected: n,
                actual: ch.len(),
            });
        }
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw channel"));
        }
    }
    let dt = uniform_dt(&raw.t)?;
    let rate = 1.0 / dt;
    if ((rate - cfg.input_rate_hz) / cfg.input_rate_hz).abs() > 1e-4 {
        return Err(Error::invalid(
            "input rate",
            format!("trace sampled at {rate:.3} Hz, config expects {} Hz", cfg.input_rate_hz),
        ));
    }

    let chain = ConditioningChain::new(cfg);
    let stages = resampling_stages(cfg);
    let run = |x: &[f64]| {
        let mut y = chain.filter(x);
        for s in &stages {
            y = s.process(&y);
        }
        y
    };
    let out: Vec<Vec<f64>> = raw.channels.iter().map(|c| run(c)).collect();
    let m = out[0].len();
    let t0 = raw.t[0];
    let t = (0..m).map(|k| t0 + k as f64 / cfg.output_rate_hz).collect();
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p - q).collect();
    Ok(SignalTrace {
        t,
        s_cos: diff(&out[0], &out[1]),
        s_sin: diff(&out[2], &out[3]),
    })
}

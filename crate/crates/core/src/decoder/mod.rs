//! Signed speed decoding from the quadrature signal pair.
//!
//! A window of `s_cos + i s_sin` is mean-removed, Hann-windowed,
//! zero-padded and transformed. The strongest signed frequency away from
//! DC, refined by a parabola through the log-magnitudes, maps to speed
//! through `v = f / xi_ground`. Confidence is the fraction of spectral
//! power in the main lobe around that peak.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensor::SignalTrace;

mod condition;

pub use condition::{
    condition, Biquad, ConditioningChain, ConditioningConfig, RationalResampler,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub sample_rate_hz: f64,
    pub window_len: usize,
    pub zero_pad: usize,
    /// Peaks below this absolute frequency are ignored.
    pub f_min_hz: f64,
    pub confidence_threshold: f64,
    pub median_len: usize,
    /// Half-width of the peak lobe, in unpadded bins, counted as peak power.
    pub lobe_half_width_bins: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 1000.0,
            window_len: 1000,
            zero_pad: 4,
            f_min_hz: 0.5,
            confidence_threshold: 0.2,
            median_len: 5,
            lobe_half_width_bins: 2.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 8 {
            return Err(Error::invalid("window_len", format!("{} < 8", self.window_len)));
        }
        if self.zero_pad == 0 {
            return Err(Error::invalid("zero_pad", "must be >= 1"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("sample_rate_hz", self.sample_rate_hz.to_string()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::invalid(
                "confidence_threshold",
                format!("{} outside [0, 1]", self.confidence_threshold),
            ));
        }
        if self.median_len == 0 {
            return Err(Error::invalid("median_len", "must be >= 1"));
        }
        Ok(())
    }

    /// Spacing of the unpadded DFT, `1 / window duration`.
    pub fn bin_hz(&self) -> f64 {
        self.sample_rate_hz / self.window_len as f64
    }

    /// Spacing of the zero-padded DFT.
    pub fn refined_bin_hz(&self) -> f64 {
        self.bin_hz() / self.zero_pad as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedEstimate {
    /// Timestamp of the last sample in the window.
    pub t_s: f64,
    pub v_hat: f64,
    pub confidence: f64,
    pub f_peak_hz: f64,
    pub accepted: bool,
}

/// Reusable window decoder holding the FFT plan and buffers.
pub struct SpectralDecoder {
    cfg: DecoderConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl SpectralDecoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window_len;
        let m = n * cfg.zero_pad;
        let fft = FftPlanner::new().plan_fft_forward(m);
        let window = (0..n)
            .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())
            .collect();
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Ok(Self {
            cfg,
            fft,
            window,
            buf: vec![Complex::default(); m],
            scratch,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Signed dominant frequency and its confidence for one window.
    pub fn peak(&mut self, s_cos: &[f64], s_sin: &[f64]) -> Result<(f64, f64)> {
        let n = self.cfg.window_len;
        for (what, s) in [("s_cos window", s_cos), ("s_sin window", s_sin)] {
            if s.len() != n {
                return Err(Error::LengthMismatch {
                    what,
                    expected: n,
                    actual: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(what));
            }
        }
        let mean_c = s_cos.iter().sum::<f64>() / n as f64;
        let mean_s = s_sin.iter().sum::<f64>() / n as f64;
        // A window with nothing left after mean removal but rounding
        // residue carries no motion.
        let raw: f64 = s_cos.iter().chain(s_sin).map(|v| v * v).sum();
        let centered: f64 = s_cos.iter().map(|v| (v - mean_c).powi(2)).sum::<f64>()
            + s_sin.iter().map(|v| (v - mean_s).powi(2)).sum::<f64>();
        if centered == 0.0 || centered <= 1e-20 * raw {
            return Ok((0.0, 0.0));
        }
        for k in 0..n {
            let w = self.window[k];
            self.buf[k] = Complex::new((s_cos[k] - mean_c) * w, (s_sin[k] - mean_s) * w);
        }
        self.buf[n..].iter_mut().for_each(|z| *z = Complex::default());
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);

        let m = self.buf.len();
        let fs = self.cfg.sample_rate_hz;
        let freq = |k: usize| {
            let k = if k < m.div_ceil(2) { k as f64 } else { k as f64 - m as f64 };
            k * fs / m as f64
        };
        let mut total = 0.0;
        let mut best: Option<(usize, f64)> = None;
        for (k, z) in self.buf.iter().enumerate() {
            if freq(k).abs() < self.cfg.f_min_hz {
                continue;
            }
            let p = z.norm_sqr();
            total += p;
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((k, p));
            }
        }
        let Some((k, peak_power)) = best.filter(|_| total > 0.0) else {
            return Ok((0.0, 0.0));
        };
        if peak_power == 0.0 {
            return Ok((0.0, 0.0));
        }

        let at = |j: isize| self.buf[j.rem_euclid(m as isize) as usize].norm_sqr().max(1e-300).ln();
        let (a, b, c) = (at(k as isize - 1), at(k as isize), at(k as isize + 1));
        let denom = a - 2.0 * b + c;
        let delta = if denom < 0.0 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let f_peak = freq(k) + delta * fs / m as f64;

        let lobe = (self.cfg.lobe_half_width_bins * self.cfg.zero_pad as f64).round() as isize;
        let mut lobe_power = 0.0;
        for j in -lobe..=lobe {
            let idx = (k as isize + j).rem_euclid(m as isize) as usize;
            if freq(idx).abs() >= self.cfg.f_min_hz {
                lobe_power += self.buf[idx].norm_sqr();
            }
        }
        Ok((f_peak, (lobe_power / total).clamp(0.0, 1.0)))
    }

    pub fn decode(&mut self, s_cos: &[f64], s_sin: &[f64], xi_ground: f64) -> Result<SpeedEstimate> {
        if !(xi_ground > 0.0 && xi_ground.is_finite()) {
            return Err(Error::invalid("xi_ground", format!("{xi_ground} must be > 0")));
        }
        let (f_peak_hz, confidence) = self.peak(s_cos, s_sin)?;
        Ok(SpeedEstimate {
            t_s: 0.0,
            v_hat: f_peak_hz / xi_ground,
            confidence,
            f_peak_hz,
            accepted: confidence > 0.0 && confidence >= self.cfg.confidence_threshold,
        })
    }
}

/// Decodes one window of exactly `cfg.window_len` samples.
pub fn decode_window(
    s_cos: &[f64],
    s_sin: &[f64],
    xi_ground: f64,
    cfg: &DecoderConfig,
) -> Result<SpeedEstimate> {
    SpectralDecoder::new(*cfg)?.decode(s_cos, s_sin, xi_ground)
}

/// Start indices of all sliding windows over `len` samples.
pub fn window_starts(len: usize, window_len: usize, stride: usize) -> Vec<usize> {
    if len < window_len || stride == 0 {
        return Vec::new();
    }
    (0..=(len - window_len) / stride).map(|i| i * stride).collect()
}

fn stride_samples(stride_ms: u32, cfg: &DecoderConfig) -> Result<usize> {
    let s = (stride_ms as f64 * 1e-3 * cfg.sample_rate_hz).round() as usize;
    if s == 0 {
        return Err(Error::invalid("stride_ms", format!("{stride_ms} ms is below one sample")));
    }
    Ok(s)
}

/// Every sliding-window estimate, rejected ones included, unfiltered.
pub fn decode_windows(
    trace: &SignalTrace,
    stride_ms: u32,
    xi_ground: f64,
    cfg: &DecoderConfig,
) -> Result<Vec<SpeedEstimate>> {
    if trace.s_cos.len() != trace.len() || trace.s_sin.len() != trace.len() {
        return Err(Error::LengthMismatch {
            what: "signal trace channels",
            expected: trace.len(),
            actual: trace.s_cos.len().min(trace.s_sin.len()),
        });
    }
    if trace.len() < cfg.window_len {
        return Err(Error::TooShort(format!(
            "trace has {} samples, window needs {}",
            trace.len(),
            cfg.window_len
        )));
    }
    let stride = stride_samples(stride_ms, cfg)?;
    let mut dec = SpectralDecoder::new(*cfg)?;
    window_starts(trace.len(), cfg.window_len, stride)
        .into_iter()
        .map(|s| {
            let e = s + cfg.window_len;
            let mut est = dec.decode(&trace.s_cos[s..e], &trace.s_sin[s..e], xi_ground)?;
            est.t_s = trace.t[e - 1];
            Ok(est)
        })
        .collect()
}

/// Sliding-window decoding: rejected windows are dropped and the
/// accepted speeds pass through a centered median filter.
pub fn decode_stream(
    trace: &SignalTrace,
    stride_ms: u32,
    xi_ground: f64,
    cfg: &DecoderConfig,
) -> Result<Vec<SpeedEstimate>> {
    let mut accepted: Vec<SpeedEstimate> = decode_windows(trace, stride_ms, xi_ground, cfg)?
        .into_iter()
        .filter(|e| e.accepted)
        .collect();
    let filtered = median_filter(
        &accepted.iter().map(|e| e.v_hat).collect::<Vec<_>>(),
        cfg.median_len,
    );
    for (e, v) in accepted.iter_mut().zip(filtered) {
        e.v_hat = v;
    }
    Ok(accepted)
}

/// Centered running median; the window shrinks symmetrically at the ends.
pub fn median_filter(values: &[f64], len: usize) -> Vec<f64> {
    let half = len.max(1) / 2;
    let n = values.len();
    let mut buf = Vec::with_capacity(len);
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend_from_slice(&values[i - h..=i + h]);
            median(&mut buf)
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstantaneousFrequency {
    /// Phase-increment frequency between consecutive samples; `None`
    /// where either sample is too weak to carry phase.
    pub series: Vec<Option<f64>>,
    pub median_hz: f64,
}

/// Phase-slope frequency estimate: `atan2(s_sin, s_cos)` unwrapped, with
/// the median increment converted to Hz.
pub fn instantaneous_frequency(
    s_cos: &[f64],
    s_sin: &[f64],
    sample_rate_hz: f64,
) -> Result<InstantaneousFrequency> {
    if s_cos.len() != s_sin.len() {
        return Err(Error::LengthMismatch {
            what: "s_sin",
            expected: s_cos.len(),
            actual: s_sin.len(),
        });
    }
    if s_cos.len() < 2 {
        return Err(Error::TooShort(format!("{} samples", s_cos.len())));
    }
    let n = s_cos.len() as f64;
    let mc = s_cos.iter().sum::<f64>() / n;
    let ms = s_sin.iter().sum::<f64>() / n;
    let z: Vec<Complex<f64>> = s_cos
        .iter()
        .zip(s_sin)
        .map(|(c, s)| Complex::new(c - mc, s - ms))
        .collect();
    let rms = (z.iter().map(|v| v.norm_sqr()).sum::<f64>() / n).sqrt();
    let floor = 0.05 * rms;
    let scale = sample_rate_hz / (2.0 * std::f64::consts::PI);
    let series: Vec<Option<f64>> = z
        .windows(2)
        .map(|w| {
            (rms > 0.0 && w[0].norm() > floor && w[1].norm() > floor)
                .then(|| (w[1] * w[0].conj()).arg() * scale)
        })
        .collect();
    let mut valid: Vec<f64> = series.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::invalid("quadrature pair", "no sample has usable amplitude"));
    }
    Ok(InstantaneousFrequency {
        median_hz: median(&mut valid),
        series,
    })
}

/// Mean true speed over the final `tail_s` seconds before each window end.
pub fn window_targets(path: &crate::trajectory::PlanarPath, ends: &[f64], tail_s: f64) -> Vec<f64> {
    ends.iter()
        .map(|&t| path.mean_speed(t - tail_s, t).unwrap_or(0.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(f: f64, n: usize, fs: f64, phase: f64) -> (Vec<f64>, Vec<f64>) {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * f * k as f64 / fs + phase;
                (a.cos(), a.sin())
            })
            .unzip()
    }

    #[test]
    fn analytic_tone_forward_and_reverse() {
        let cfg = DecoderConfig::default();
        let (c, s) = tone(30.0, 1000, 1000.0, 0.3);
        let est = decode_window(&c, &s, 100.0, &cfg).unwrap();
        assert!((est.f_peak_hz - 30.0).abs() < 0.01, "{est:?}");
        assert!((est.v_hat - 0.30).abs() < 1e-4);
        assert!(est.accepted && est.confidence > 0.9);

        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let est = decode_window(&c, &neg, 100.0, &cfg).unwrap();
        assert!((est.v_hat + 0.30).abs() < 1e-4);
    }

    #[test]
    fn refinement_is_sub_bin() {
        let cfg = DecoderConfig::default();
        for f in [3.37, 12.81, 47.5, -22.13] {
            let (c, s) = tone(f, 1000, 1000.0, 1.0);
            let est = decode_window(&c, &s, 1.0, &cfg).unwrap();
            assert!((est.f_peak_hz - f).abs() < 0.05, "{f}: {}", est.f_peak_hz);
        }
    }

    #[test]
    fn zero_input_is_rejected_not_an_error() {
        let cfg = DecoderConfig::default();
        let z = vec![0.0; 1000];
        let est = decode_window(&z, &z, 50.0, &cfg).unwrap();
        assert_eq!(est.confidence, 0.0);
        assert!(!est.accepted);
        let k = vec![1.7; 1000];
        assert!(!decode_window(&k, &k, 50.0, &cfg).unwrap().accepted);
    }

    #[test]
    fn wrong_length_and_nan() {
        let cfg = DecoderConfig::default();
        let a = vec![0.0; 999];
        assert!(matches!(
            decode_window(&a, &a, 50.0, &cfg),
            Err(Error::LengthMismatch { .. })
        ));
        let mut b = vec![0.0; 1000];
        b[3] = f64::NAN;
        assert!(matches!(decode_window(&b, &b, 50.0, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn channel_swap_and_scaling() {
        let cfg = DecoderConfig::default();
        let (c, s) = tone(17.3, 1000, 1000.0, 0.0);
        let noise: Vec<f64> = (0..1000).map(|k| ((k * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        let c: Vec<f64> = c.iter().zip(&noise).map(|(a, b)| a + 0.3 * b).collect();
        let a = decode_window(&c, &s, 10.0, &cfg).unwrap();
        let b = decode_window(&s, &c, 10.0, &cfg).unwrap();
        assert_eq!(a.f_peak_hz, -b.f_peak_hz);
        let c5: Vec<f64> = c.iter().map(|v| v * 5.0).collect();
        let s5: Vec<f64> = s.iter().map(|v| v * 5.0).collect();
        let d = decode_window(&c5, &s5, 10.0, &cfg).unwrap();
        assert!((d.v_hat - a.v_hat).abs() < 1e-12);
        assert!((d.confidence - a.confidence).abs() < 1e-12);
    }

    fn trace_from(c: Vec<f64>, s: Vec<f64>) -> SignalTrace {
        SignalTrace {
            t: (0..c.len()).map(|k| k as f64 / 1000.0).collect(),
            s_cos: c,
            s_sin: s,
        }
    }

    #[test]
    fn stream_counts_and_median() {
        let cfg = DecoderConfig::default();
        let (c, s) = tone(20.0, 2001, 1000.0, 0.0);
        let trace = trace_from(c, s);
        let all = decode_windows(&trace, 10, 100.0, &cfg).unwrap();
        assert_eq!(all.len(), 101);
        let out = decode_stream(&trace, 10, 100.0, &cfg).unwrap();
        assert_eq!(out.len(), 101);
        for (a, b) in all.iter().zip(&out) {
            assert_eq!(a.v_hat, b.v_hat);
        }
        assert_eq!(window_starts(2000, 1000, 10).len(), 101);
        assert!(decode_stream(&trace_from(vec![0.0; 999], vec![0.0; 999]), 10, 1.0, &cfg).is_err());
    }

    #[test]
    fn corrupted_window_leaves_a_gap() {
        let cfg = DecoderConfig::default();
        let (mut c, mut s) = tone(20.0, 5000, 1000.0, 0.0);
        c[2000..3000].iter_mut().for_each(|v| *v = 0.0);
        s[2000..3000].iter_mut().for_each(|v| *v = 0.0);
        let trace = trace_from(c, s);

        // Back-to-back windows: exactly the blank one drops out.
        let out = decode_stream(&trace, 1000, 100.0, &cfg).unwrap();
        let times: Vec<f64> = out.iter().map(|e| e.t_s).collect();
        assert_eq!(times, vec![trace.t[999], trace.t[1999], trace.t[3999], trace.t[4999]]);
        assert!(out.iter().all(|e| (e.v_hat - 0.2).abs() < 1e-3));

        // Overlapping windows: the blank window is rejected and every window
        // that is mostly tone still decodes correctly.
        let all = decode_windows(&trace, 10, 100.0, &cfg).unwrap();
        let blank = all.iter().find(|e| e.t_s == trace.t[2999]).unwrap();
        assert!(!blank.accepted && blank.confidence == 0.0);
        for (k, e) in all.iter().enumerate() {
            let start = k * 10;
            let overlap = (start + 1000).min(3000).saturating_sub(start.max(2000));
            if overlap <= 500 {
                assert!(e.accepted, "window at {start}");
                assert!((e.v_hat - 0.2).abs() < 0.005, "window at {start}: {}", e.v_hat);
            }
        }
    }

    #[test]
    fn median_filter_behaviour() {
        assert_eq!(median_filter(&[1.0, 1.0, 9.0, 1.0, 1.0], 5), vec![1.0; 5]);
        assert_eq!(median_filter(&[3.0, 1.0, 2.0], 1), vec![3.0, 1.0, 2.0]);
        assert_eq!(median_filter(&[], 5), Vec::<f64>::new());
    }

    #[test]
    fn instantaneous_frequency_examples() {
        let (c, s) = tone(30.0, 1000, 1000.0, 0.2);
        let f = instantaneous_frequency(&c, &s, 1000.0).unwrap();
        assert!((f.median_hz - 30.0).abs() < 0.1);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let f = instantaneous_frequency(&c, &neg, 1000.0).unwrap();
        assert!((f.median_hz + 30.0).abs() < 0.1);
        let z = vec![0.0; 10];
        assert!(instantaneous_frequency(&z, &z, 1000.0).is_err());
    }
}

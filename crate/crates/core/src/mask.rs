//! Gabor mask model and printable transmittance rasters.
//!
//! The aperture spans `u in [-1, 1]`; `xi0` counts carrier cycles across
//! that full width, so the carrier is `cos(pi xi0 u)`. Signed Gabor profiles are split into two
//! non-negative masks so that `plus - minus` reproduces the profile.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub xi0: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl GaborParams {
    /// Hand-picked baseline: 6 cycles, unit envelope, full amplitude.
    pub const FIXED: GaborParams = GaborParams {
        xi0: 6.0,
        sigma: 1.0,
        alpha: 1.0,
    };

    pub fn new(xi0: f64, sigma: f64, alpha: f64) -> Result<Self> {
        let p = Self { xi0, sigma, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi0.is_finite() && self.xi0 > 0.0) {
            return Err(Error::invalid("xi0", format!("{} must be > 0", self.xi0)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("{} must be > 0", self.sigma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(
                "alpha",
                format!("{} must lie in (0, 1]", self.alpha),
            ));
        }
        Ok(())
    }

    #[inline]
    fn envelope(&self, u: f64) -> f64 {
        self.alpha * (-u * u / (2.0 * self.sigma * self.sigma)).exp()
    }
}

impl Default for GaborParams {
    fn default() -> Self {
        Self::FIXED
    }
}

/// How the sine mask is derived from the cosine one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SineConvention {
    /// Carrier shifted by a quarter period, envelope stays centered.
    #[default]
    CarrierShift,
    /// Whole cosine Gabor translated by a quarter period, `1 / (2 xi0)`.
    RigidTranslation,
}

/// `alpha exp(-u^2 / 2 sigma^2) cos(pi xi0 u)`
#[inline]
pub fn eval_gabor_cos(p: &GaborParams, u: f64) -> f64 {
    p.envelope(u) * (PI * p.xi0 * u).cos()
}

/// `alpha exp(-u^2 / 2 sigma^2) sin(pi xi0 u)`
#[inline]
pub fn eval_gabor_sin(p: &GaborParams, u: f64) -> f64 {
    p.envelope(u) * (PI * p.xi0 * u).sin()
}

pub fn eval_gabor_sin_with(p: &GaborParams, u: f64, convention: SineConvention) -> f64 {
    match convention {
        SineConvention::CarrierShift => eval_gabor_sin(p, u),
        SineConvention::RigidTranslation => eval_gabor_cos(p, u - 1.0 / (2.0 * p.xi0)),
    }
}

/// Splits a signed transmittance into `(max(g, 0), max(-g, 0))`.
pub fn decompose(g: f64) -> Result<(f64, f64)> {
    if !(g.abs() <= 1.0) {
        return Err(Error::invalid("mask value", format!("|{g}| > 1")));
    }
    Ok((g.max(0.0), (-g).max(0.0)))
}

/// Pixel-center coordinate of column `j` on `[-1, 1]`.
#[inline]
pub fn pixel_center(j: usize, resolution: usize) -> f64 {
    -1.0 + (2 * j + 1) as f64 / resolution as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    CosPlus,
    CosMinus,
    SinPlus,
    SinMinus,
}

impl Channel {
    pub const ALL: [Channel; 4] = [
        Channel::CosPlus,
        Channel::CosMinus,
        Channel::SinPlus,
        Channel::SinMinus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::CosPlus => "cos_plus",
            Channel::CosMinus => "cos_minus",
            Channel::SinPlus => "sin_plus",
            Channel::SinMinus => "sin_minus",
        }
    }
}

/// Four square transmittance grids, row-major, every row identical.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    resolution: usize,
    grids: [Vec<f64>; 4],
}

impl MaskRaster {
    pub fn from_grids(resolution: usize, grids: [Vec<f64>; 4]) -> Result<Self> {
        for g in &grids {
            if g.len() != resolution * resolution {
                return Err(Error::LengthMismatch {
                    what: "mask grid",
                    expected: resolution * resolution,
                    actual: g.len(),
                });
            }
            if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid("mask transmittance", format!("{v} outside [0, 1]")));
            }
        }
        Ok(Self { resolution, grids })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn grid(&self, channel: Channel) -> &[f64] {
        &self.grids[channel.index()]
    }

    pub fn grids(&self) -> &[Vec<f64>; 4] {
        &self.grids
    }

    /// Signed cosine profile `cos_plus - cos_minus`.
    pub fn signed_cos(&self) -> Vec<f64> {
        difference(&self.grids[0], &self.grids[1])
    }

    pub fn signed_sin(&self) -> Vec<f64> {
        difference(&self.grids[2], &self.grids[3])
    }

    /// Bilinear resampling to another square resolution (used when a
    /// stored raster does not match the detector view size).
    pub fn resampled(&self, resolution: usize) -> MaskRaster {
        if resolution == self.resolution {
            return self.clone();
        }
        let n = self.resolution;
        let coord = |j: usize| {
            let u = pixel_center(j, resolution);
            ((u + 1.0) * n as f64 / 2.0 - 0.5).clamp(0.0, (n - 1) as f64)
        };
        let grids = self.grids.clone().map(|g| {
            let mut out = Vec::with_capacity(resolution * resolution);
            for r in 0..resolution {
                let gr = coord(r);
                let (r0, fr) = (gr.floor() as usize, gr - gr.floor());
                let r1 = (r0 + 1).min(n - 1);
                for c in 0..resolution {
                    let gc = coord(c);
                    let (c0, fc) = (gc.floor() as usize, gc - gc.floor());
                    let c1 = (c0 + 1).min(n - 1);
                    let top = g[r0 * n + c0] * (1.0 - fc) + g[r0 * n + c1] * fc;
                    let bot = g[r1 * n + c0] * (1.0 - fc) + g[r1 * n + c1] * fc;
                    out.push((top * (1.0 - fr) + bot * fr).clamp(0.0, 1.0));
                }
            }
            out
        });
        MaskRaster { resolution, grids }
    }
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, m)| p - m).collect()
}

/// Renders the four masks at `resolution x resolution`, sampling the
/// Gabor profiles at pixel centers along columns.
pub fn rasterize(p: &GaborParams, resolution: usize) -> Result<MaskRaster> {
    p.validate()?;
    if resolution < 32 {
        return Err(Error::invalid(
            "mask resolution",
            format!("{resolution} < 32"),
        ));
    }
    let mut rows: [Vec<f64>; 4] = Default::default();
    for j in 0..resolution {
        let u = pixel_center(j, resolution);
        let (cp, cm) = decompose(eval_gabor_cos(p, u))?;
        let (sp, sm) = decompose(eval_gabor_sin(p, u))?;
        for (row, v) in rows.iter_mut().zip([cp, cm, sp, sm]) {
            row.push(v);
        }
    }
    let grids = rows.map(|row| row.repeat(resolution));
    Ok(MaskRaster { resolution, grids })
}

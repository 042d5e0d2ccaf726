//! Ground-plane reflectance fields.
//!
//! A [`TextureField`] is a regular grid of reflectance values in `[0, 1]`
//! laid over a physical rectangle. Node `(row, col)` sits at
//! `(col * dx, row * dy)` meters; between nodes the field is bilinear.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrapMode {
    #[default]
    Tile,
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureField {
    width: usize,
    height: usize,
    data: Vec<f64>,
    extent_m: [f64; 2],
    wrap: WrapMode,
}

impl TextureField {
    /// Builds a field from row-major values. Every value must lie in `[0, 1]`.
    pub fn from_grid(
        width: usize,
        height: usize,
        data: Vec<f64>,
        extent_m: [f64; 2],
        wrap: WrapMode,
    ) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::invalid("texture grid", "need at least 2x2 nodes"));
        }
        if data.len() != width * height {
            return Err(Error::LengthMismatch {
                what: "texture grid",
                expected: width * height,
                actual: data.len(),
            });
        }
        check_extent(extent_m)?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("texture value", format!("{v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
            extent_m,
            wrap,
        })
    }

    pub fn uniform(value: f64, resolution: usize, extent_m: [f64; 2]) -> Result<Self> {
        Self::from_grid(
            resolution,
            resolution,
            vec![value; resolution * resolution],
            extent_m,
            WrapMode::Tile,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn extent_m(&self) -> [f64; 2] {
        self.extent_m
    }

    pub fn wrap_mode(&self) -> WrapMode {
        self.wrap
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Node spacing in meters along x and y.
    pub fn spacing(&self) -> (f64, f64) {
        match self.wrap {
            // A tiled grid of n nodes covers the extent with n cells.
            WrapMode::Tile => (
                self.extent_m[0] / self.width as f64,
                self.extent_m[1] / self.height as f64,
            ),
            WrapMode::Clamp => (
                self.extent_m[0] / (self.width - 1) as f64,
                self.extent_m[1] / (self.height - 1) as f64,
            ),
        }
    }

    pub fn node(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Bilinear sample at a ground point in meters.
    #[inline]
    pub fn sample(&self, x_m: f64, y_m: f64) -> f64 {
        let (dx, dy) = self.spacing();
        self.sample_grid(x_m / dx, y_m / dy)
    }

    /// Bilinear sample in fractional grid coordinates (`gx` along columns).
    #[inline]
    pub(crate) fn sample_grid(&self, gx: f64, gy: f64) -> f64 {
        let (c0, c1, fx) = axis_index(gx, self.width, self.wrap);
        let (r0, r1, fy) = axis_index(gy, self.height, self.wrap);
        let w = self.width;
        let a = self.data[r0 * w + c0];
        let b = self.data[r0 * w + c1];
        let c = self.data[r1 * w + c0];
        let d = self.data[r1 * w + c1];
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    /// Grid offset that maps the box `[x0, x1] x [y0, y1]` fully inside the
    /// stored nodes, so [`Self::sample_interior`] can skip wrapping.
    pub(crate) fn interior_offset(&self, x0: f64, x1: f64, y0: f64, y1: f64) -> Option<(f64, f64)> {
        let fit = |lo: f64, hi: f64, n: usize| -> Option<f64> {
            if !(lo.is_finite() && hi.is_finite()) {
                return None;
            }
            let shift = match self.wrap {
                WrapMode::Tile => -(lo / n as f64).floor() * n as f64,
                WrapMode::Clamp => 0.0,
            };
            (lo + shift >= 0.0 && hi + shift < (n - 1) as f64).then_some(shift)
        };
        Some((fit(x0, x1, self.width)?, fit(y0, y1, self.height)?))
    }

    /// Bilinear sample for coordinates already known to be interior.
    #[inline]
    pub(crate) fn sample_interior(&self, gx: f64, gy: f64) -> f64 {
        let c0 = gx as usize;
        let r0 = gy as usize;
        let fx = gx - c0 as f64;
        let fy = gy - r0 as f64;
        let w = self.width;
        let i = r0 * w + c0;
        let a = self.data[i];
        let b = self.data[i + 1];
        let c = self.data[i + w];
        let d = self.data[i + w + 1];
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }
}

#[inline]
fn axis_index(g: f64, n: usize, wrap: WrapMode) -> (usize, usize, f64) {
    match wrap {
        WrapMode::Tile => {
            let fl = g.floor();
            let frac = g - fl;
            let i0 = (fl as i64).rem_euclid(n as i64) as usize;
            let i1 = if i0 + 1 == n { 0 } else { i0 + 1 };
            (i0, i1, frac)
        }
        WrapMode::Clamp => {
            let max = (n - 1) as f64;
            let g = if g.is_nan() { 0.0 } else { g.clamp(0.0, max) };
            let fl = g.floor();
            let i0 = fl as usize;
            if i0 + 1 >= n {
                (n - 1, n - 1, 0.0)
            } else {
                (i0, i0 + 1, g - fl)
            }
        }
    }
}

fn check_extent(extent_m: [f64; 2]) -> Result<()> {
    if extent_m.iter().all(|e| e.is_finite() && *e > 0.0) {
        Ok(())
    } else {
        Err(Error::invalid(
            "extent_m",
            format!("{extent_m:?} must be positive in both axes"),
        ))
    }
}

/// Generator selection and its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextureKind {
    /// White noise band-passed to an annulus `[low_cpm, high_cpm]` in cycles per meter.
    BandlimitedNoise { low_cpm: f64, high_cpm: f64, seed: u64 },
    /// `0.5 + 0.5 cos(2 pi f (x cos a + y sin a))`.
    Sinusoid {
        freq_cpm: f64,
        #[serde(default)]
        angle_rad: f64,
    },
    Checker { cell_m: f64 },
    /// Periodic value-noise fractal sum.
    PerlinLike {
        base_cells: usize,
        octaves: u32,
        #[serde(default = "default_persistence")]
        persistence: f64,
        seed: u64,
    },
    ImageFile { path: String },
}

fn default_persistence() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    #[serde(flatten)]
    pub kind: TextureKind,
    #[serde(default = "default_resolution")]
    pub resolution_px: usize,
    #[serde(default = "default_extent")]
    pub extent_m: [f64; 2],
    #[serde(default)]
    pub wrap: WrapMode,
}

fn default_resolution() -> usize {
    1024
}

fn default_extent() -> [f64; 2] {
    [1.0, 1.0]
}

impl TextureSpec {
    pub fn new(kind: TextureKind, resolution_px: usize, extent_m: f64) -> Self {
        Self {
            kind,
            resolution_px,
            extent_m: [extent_m, extent_m],
            wrap: WrapMode::Tile,
        }
    }

    /// Copy with the generator seed replaced, for kinds that have one.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out.kind {
            TextureKind::BandlimitedNoise { seed: s, .. } | TextureKind::PerlinLike { seed: s, .. } => {
                *s = seed
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution_px < 64 {
            return Err(Error::invalid(
                "resolution_px",
                format!("{} < 64", self.resolution_px),
            ));
        }
        check_extent(self.extent_m)?;
        match &self.kind {
            TextureKind::BandlimitedNoise { low_cpm, high_cpm, .. } => {
                if !(*low_cpm >= 0.0 && high_cpm > low_cpm) {
                    return Err(Error::invalid(
                        "bandlimited_noise band",
                        format!("need 0 <= low < high, got [{low_cpm}, {high_cpm}]"),
                    ));
                }
            }
            TextureKind::Sinusoid { freq_cpm, .. } => {
                if !(freq_cpm.is_finite() && *freq_cpm >= 0.0) {
                    return Err(Error::invalid("freq_cpm", freq_cpm.to_string()));
                }
            }
            TextureKind::Checker { cell_m } => {
                if !(*cell_m > 0.0) {
                    return Err(Error::invalid("cell_m", cell_m.to_string()));
                }
            }
            TextureKind::PerlinLike {
                base_cells,
                octaves,
                persistence,
                ..
            } => {
                if *base_cells == 0 || *octaves == 0 || !(*persistence > 0.0) {
                    return Err(Error::invalid(
                        "perlin_like",
                        "base_cells, octaves and persistence must be positive",
                    ));
                }
            }
            TextureKind::ImageFile { .. } => {}
        }
        Ok(())
    }
}

/// Builds the field described by `spec`. Procedural output is a pure
/// function of the spec, seed included.
pub fn generate(spec: &TextureSpec) -> Result<TextureField> {
    if let TextureKind::ImageFile { path } = &spec.kind {
        check_extent(spec.extent_m)?;
        let mut field = load_image(path, spec.extent_m)?;
        field.wrap = spec.wrap;
        return Ok(field);
    }
    spec.validate()?;
    let n = spec.resolution_px;
    let [ex, ey] = spec.extent_m;
    let cells = match spec.wrap {
        WrapMode::Tile => n as f64,
        WrapMode::Clamp => (n - 1) as f64,
    };
    let (dx, dy) = (ex / cells, ey / cells);
    let data = match &spec.kind {
        TextureKind::Sinusoid { freq_cpm, angle_rad } => {
            let (s, c) = angle_rad.sin_cos();
            grid(n, |r, col| {
                let x = col as f64 * dx;
                let y = r as f64 * dy;
                0.5 + 0.5 * (2.0 * PI * freq_cpm * (x * c + y * s)).cos()
            })
        }
        TextureKind::Checker { cell_m } => grid(n, |r, col| {
            let cx = (col as f64 * dx / cell_m + 1e-9).floor() as i64;
            let cy = (r as f64 * dy / cell_m + 1e-9).floor() as i64;
            ((cx + cy).rem_euclid(2)) as f64
        }),
        TextureKind::BandlimitedNoise {
            low_cpm,
            high_cpm,
            seed,
        } => normalize(bandlimited_noise(n, spec.extent_m, *low_cpm, *high_cpm, *seed)),
        TextureKind::PerlinLike {
            base_cells,
            octaves,
            persistence,
            seed,
        } => normalize(value_noise(n, *base_cells, *octaves, *persistence, *seed)),
        TextureKind::ImageFile { .. } => unreachable!(),
    };
    TextureField::from_grid(n, n, data, spec.extent_m, spec.wrap)
}

fn grid(n: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(f(r, c));
        }
    }
    out
}

/// Per-texture min-max normalization to `[0, 1]`. A constant input maps to 0.5.
fn normalize(mut data: Vec<f64>) -> Vec<f64> {
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span <= 0.0 || !span.is_finite() {
        data.iter_mut().for_each(|v| *v = 0.5);
    } else {
        data.iter_mut()
            .for_each(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
    }
    data
}

fn bandlimited_noise(n: usize, extent_m: [f64; 2], low: f64, high: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, rng::tag::TEXTURE, 0);
    let mut buf: Vec<Complex<f64>> = (0..n * n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    fft2(&mut buf, n, fwd.as_ref());

    let signed = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for r in 0..n {
        let fy = signed(r) / extent_m[1];
        for c in 0..n {
            let fx = signed(c) / extent_m[0];
            let f = (fx * fx + fy * fy).sqrt();
            if f < low || f > high {
                buf[r * n + c] = Complex::new(0.0, 0.0);
            }
        }
    }
    fft2(&mut buf, n, inv.as_ref());
    buf.into_iter().map(|z| z.re).collect()
}

fn fft2(buf: &mut [Complex<f64>], n: usize, fft: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        fft.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
}

fn value_noise(n: usize, base_cells: usize, octaves: u32, persistence: f64, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    let mut amplitude = 1.0;
    for octave in 0..octaves {
        let cells = base_cells << octave;
        let mut rng = rng::stream(seed, rng::tag::TEXTURE, 1 + octave as u64);
        let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.random::<f64>()).collect();
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for r in 0..n {
            let gy = r as f64 * cells as f64 / n as f64;
            let (y0, fy) = (gy.floor() as usize % cells, smooth(gy - gy.floor()));
            let y1 = (y0 + 1) % cells;
            for c in 0..n {
                let gx = c as f64 * cells as f64 / n as f64;
                let (x0, fx) = (gx.floor() as usize % cells, smooth(gx - gx.floor()));
                let x1 = (x0 + 1) % cells;
                let top = lattice[y0 * cells + x0] * (1.0 - fx) + lattice[y0 * cells + x1] * fx;
                let bottom = lattice[y1 * cells + x0] * (1.0 - fx) + lattice[y1 * cells + x1] * fx;
                out[r * n + c] += amplitude * (top * (1.0 - fy) + bottom * fy);
            }
        }
        amplitude *= persistence;
    }
    out
}

/// Loads an 8-bit grayscale PGM (P5) or an 8-bit PNG as a tiled field.
///
/// Values are scaled by 1/255 without normalization. Color PNGs are
/// converted with luma weights 0.299/0.587/0.114.
pub fn load_image(path: impl AsRef<Path>, extent_m: [f64; 2]) -> Result<TextureField> {
    let path = path.as_ref();
    check_extent(extent_m)?;
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let (width, height, data) = if bytes.starts_with(b"P5") {
        let (w, h, pixels) = crate::io::parse_pgm(&bytes)
            .map_err(|reason| Error::format(path.display().to_string(), reason))?;
        (w, h, pixels.iter().map(|&p| p as f64 / 255.0).collect())
    } else if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes).map_err(|reason| Error::format(path.display().to_string(), reason))?
    } else {
        return Err(Error::Unsupported {
            what: "image format",
            value: path.display().to_string(),
        });
    };
    TextureField::from_grid(width, height, data, extent_m, WrapMode::Tile)
}

fn decode_png(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma8(gray) => {
            gray.into_raw().into_iter().map(|p| p as f64 / 255.0).collect()
        }
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                let luma = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
                (luma / 255.0).clamp(0.0, 1.0)
            })
            .collect(),
    };
    Ok((w, h, data))
}

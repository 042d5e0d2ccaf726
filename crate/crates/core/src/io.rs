//! File formats: PGM images, CSV traces/paths/estimates, mask JSON.
//!
//! Writers produce `\n`-terminated UTF-8 with `.` decimals. Readers look
//! columns up by header name, so column order in imported files is free.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::decoder::SpeedEstimate;
use crate::error::{Error, Result};
use crate::mask::{Channel, GaborParams, MaskRaster};
use crate::sensor::{FourChannelTrace, SignalTrace};
use crate::texture::TextureField;
use crate::trajectory::{reconstruct_rates, PlanarPath};

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::file(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::file(path, e))
}

/// Writes a file, creating parent directories as needed.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::file(path, e))
}

/// Parses binary 8-bit PGM (`P5`), returning width, height and pixels.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let mut num = |what: &str| -> Result<usize, String> {
        token()?
            .parse::<usize>()
            .map_err(|_| format!("bad {what}"))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if w == 0 || h == 0 {
        return Err("zero-sized image".into());
    }
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported, expected 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = w * h;
    if bytes.len() < start + need {
        return Err(format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(start)));
    }
    Ok((w, h, bytes[start..start + need].to_vec()))
}

pub fn write_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels[..width * height]);
    out
}

/// 8-bit PGM of a texture, row 0 first.
pub fn texture_to_pgm(field: &TextureField) -> Vec<u8> {
    let px: Vec<u8> = field.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(field.width(), field.height(), &px)
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    context: String,
}

impl Table {
    fn parse(text: &str, context: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let fmt = |e: csv::Error| Error::format(context, e.to_string());
        let headers = rdr.headers().map_err(fmt)?.iter().map(str::to_owned).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_owned).collect()).map_err(fmt))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(Self {
            headers,
            rows,
            context: context.to_owned(),
        })
    }

    fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let Some(c) = self.column(name) else {
            return Err(Error::format(&self.context, format!("missing column `{name}`")));
        };
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[c].parse::<f64>().map_err(|_| {
                    Error::format(&self.context, format!("row {}: `{}` is not a number", i + 2, r[c]))
                })
            })
            .collect()
    }

    fn bools(&self, name: &str) -> Result<Vec<bool>> {
        let Some(c) = self.column(name) else {
            return Err(Error::format(&self.context, format!("missing column `{name}`")));
        };
        self.rows
            .iter()
            .map(|r| match r[c].to_ascii_lowercase().as_str() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::format(&self.context, format!("`{other}` is not a boolean"))),
            })
            .collect()
    }
}

fn csv_out(header: &str, n: usize, mut row: impl FnMut(&mut String, usize)) -> String {
    let mut s = String::with_capacity(header.len() + 1 + n * 64);
    s.push_str(header);
    s.push('\n');
    for i in 0..n {
        row(&mut s, i);
        s.push('\n');
    }
    s
}

pub const RAW_HEADER: &str = "t,s_cos_p,s_cos_m,s_sin_p,s_sin_m";
pub const SIGNAL_HEADER: &str = "t,s_cos,s_sin";
pub const PATH_HEADER: &str = "t,x,y,yaw,v_x,omega_z";
pub const ESTIMATE_HEADER: &str = "t,v_hat,f_peak,confidence,accepted";

pub fn four_channel_to_csv(trace: &FourChannelTrace) -> String {
    let c = &trace.channels;
    csv_out(RAW_HEADER, trace.len(), |s, i| {
        let _ = write!(
            s,
            "{:.6},{:.9},{:.9},{:.9},{:.9}",
            trace.t[i], c[0][i], c[1][i], c[2][i], c[3][i]
        );
    })
}

pub fn four_channel_from_csv(text: &str) -> Result<FourChannelTrace> {
    let tab = Table::parse(text, "raw trace csv")?;
    let mut channels: [Vec<f64>; 4] = Default::default();
    for (slot, name) in channels.iter_mut().zip(["s_cos_p", "s_cos_m", "s_sin_p", "s_sin_m"]) {
        *slot = tab.floats(name)?;
    }
    Ok(FourChannelTrace {
        t: tab.floats("t")?,
        channels,
    })
}

pub fn signal_to_csv(trace: &SignalTrace) -> String {
    csv_out(SIGNAL_HEADER, trace.len(), |s, i| {
        let _ = write!(s, "{:.6},{:.9},{:.9}", trace.t[i], trace.s_cos[i], trace.s_sin[i]);
    })
}

pub fn signal_from_csv(text: &str) -> Result<SignalTrace> {
    let tab = Table::parse(text, "signal trace csv")?;
    Ok(SignalTrace {
        t: tab.floats("t")?,
        s_cos: tab.floats("s_cos")?,
        s_sin: tab.floats("s_sin")?,
    })
}

pub fn path_to_csv(path: &PlanarPath) -> String {
    csv_out(PATH_HEADER, path.len(), |s, i| {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            path.t[i], path.x[i], path.y[i], path.yaw[i], path.v_x[i], path.omega_z[i]
        );
    })
}

/// Reads a path; when `v_x` or `omega_z` is absent both are rebuilt from
/// the poses with a five-point derivative stencil.
pub fn path_from_csv(text: &str) -> Result<PlanarPath> {
    let tab = Table::parse(text, "path csv")?;
    let mut path = PlanarPath {
        t: tab.floats("t")?,
        x: tab.floats("x")?,
        y: tab.floats("y")?,
        yaw: tab.floats("yaw")?,
        ..Default::default()
    };
    if tab.column("v_x").is_some() && tab.column("omega_z").is_some() {
        path.v_x = tab.floats("v_x")?;
        path.omega_z = tab.floats("omega_z")?;
    } else {
        reconstruct_rates(&mut path)?;
    }
    path.check_lengths()?;
    Ok(path)
}

pub fn estimates_to_csv(est: &[SpeedEstimate]) -> String {
    csv_out(ESTIMATE_HEADER, est.len(), |s, i| {
        let e = &est[i];
        let _ = write!(
            s,
            "{:.6},{:.9},{:.9},{:.9},{}",
            e.t_s, e.v_hat, e.f_peak_hz, e.confidence, e.accepted
        );
    })
}

pub fn estimates_from_csv(text: &str) -> Result<Vec<SpeedEstimate>> {
    let tab = Table::parse(text, "estimates csv")?;
    let t = tab.floats("t")?;
    let v = tab.floats("v_hat")?;
    let f = tab.floats("f_peak")?;
    let c = tab.floats("confidence")?;
    let a = tab.bools("accepted")?;
    Ok((0..t.len())
        .map(|i| SpeedEstimate {
            t_s: t[i],
            v_hat: v[i],
            f_peak_hz: f[i],
            confidence: c[i],
            accepted: a[i],
        })
        .collect())
}

pub fn gyro_to_csv(t: &[f64], omega: &[f64]) -> String {
    csv_out("t,omega_z", t.len(), |s, i| {
        let _ = write!(s, "{:.6},{}", t[i], omega[i]);
    })
}

pub fn gyro_from_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let tab = Table::parse(text, "gyro csv")?;
    Ok((tab.floats("t")?, tab.floats("omega_z")?))
}

/// Mask bundle: resolution, optional generating parameters, and each
/// channel as base64 little-endian `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskJson {
    pub resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<GaborParams>,
    pub cos_plus: String,
    pub cos_minus: String,
    pub sin_plus: String,
    pub sin_minus: String,
}

fn encode_grid(g: &[f64]) -> String {
    let bytes: Vec<u8> = g.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_grid(s: &str, n: usize) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s.trim())
        .map_err(|e| Error::format("mask json", e.to_string()))?;
    if bytes.len() != n * 8 {
        return Err(Error::LengthMismatch {
            what: "mask grid bytes",
            expected: n * 8,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn mask_to_json(mask: &MaskRaster, params: Option<GaborParams>) -> String {
    let g = mask.grids();
    let doc = MaskJson {
        resolution: mask.resolution(),
        params,
        cos_plus: encode_grid(&g[0]),
        cos_minus: encode_grid(&g[1]),
        sin_plus: encode_grid(&g[2]),
        sin_minus: encode_grid(&g[3]),
    };
    serde_json::to_string_pretty(&doc).expect("mask json serializes")
}

pub fn mask_from_json(text: &str) -> Result<(MaskRaster, Option<GaborParams>)> {
    let doc: MaskJson =
        serde_json::from_str(text).map_err(|e| Error::format("mask json", e.to_string()))?;
    let n = doc.resolution * doc.resolution;
    let grids = [
        decode_grid(&doc.cos_plus, n)?,
        decode_grid(&doc.cos_minus, n)?,
        decode_grid(&doc.sin_plus, n)?,
        decode_grid(&doc.sin_minus, n)?,
    ];
    Ok((MaskRaster::from_grids(doc.resolution, grids)?, doc.params))
}

/// One PGM per channel, transmission mapped to 0..255 and clipped at 1.
pub fn mask_pgms(mask: &MaskRaster) -> Vec<(&'static str, Vec<u8>)> {
    let n = mask.resolution();
    Channel::ALL
        .iter()
        .map(|&ch| {
            let px: Vec<u8> = mask
                .grid(ch)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            (ch.name(), write_pgm(n, n, &px))
        })
        .collect()
}
